//! Cryptographic primitives shared by every component.
//!
//! - `hash` is SHA-1, matching the 160-bit register width of the emulated
//!   TPM 1.2. SHA-1 is cryptographically broken for collision resistance;
//!   it is kept for fidelity to the emulated hardware generation and is
//!   isolated behind this module so it can be swapped.
//! - Asymmetric keys are Curve25519 pairs (~128-bit security, comfortably
//!   above the 2048-bit-RSA baseline): an X25519 key for encryption and an
//!   Ed25519 key for signatures, handled as one logical keypair.
//! - `encrypt` is hybrid: an ephemeral X25519 agreement feeds a SHA-256 KDF
//!   whose output keys ChaCha20-Poly1305 over the payload, so payloads of
//!   any size ride under a public key and every corruption is detected.
//! - All randomness flows from caller-supplied seedable generators so runs
//!   replay bit-exactly under a fixed seed.
//!
//! The X25519 ladder is implemented here (the vendored crate set has no
//! standalone implementation with seedable key generation); it is pinned by
//! the published RFC 7748 test vectors, including the iterated one.
//!
//! Canonical public-key encoding (the bytes `key_id` digests and every
//! signature over a public key cover): two length-prefixed fields, the
//! 32-byte X25519 encryption key then the 32-byte Ed25519 verifying key,
//! using the `wire` primitives.

use rand_core::RngCore;
use ring::signature::KeyPair as _;
use thiserror::Error;

use crate::wire::{Reader, Writer};

pub const DIGEST_LEN: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("ciphertext failed integrity verification")]
    Integrity,
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("signature verification failed")]
    BadSignature,
    #[error("certificate invalid: {0}")]
    BadCertificate(&'static str),
}

// ---------------------------------------------------------------------------
// Digest

/// A 160-bit SHA-1 digest; the unit of measurement, PCR state, and key ids.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_slice(s: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; DIGEST_LEN] = s.try_into().map_err(|_| CryptoError::Malformed("digest"))?;
        Ok(Digest(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::Malformed("digest hex"))?;
        Digest::from_slice(&bytes)
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-1 of arbitrary bytes.
pub fn hash(data: &[u8]) -> Digest {
    let d = ring::digest::digest(&ring::digest::SHA1_FOR_LEGACY_USE_ONLY, data);
    Digest(d.as_ref().try_into().unwrap())
}

/// SHA-256, used inside the hybrid-encryption KDF, nonce derivation, and
/// as the harness's sub-seed derivation function.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    let d = ring::digest::digest(&ring::digest::SHA256, data);
    d.as_ref().try_into().unwrap()
}

/// Constant-time equality for secret digests (password hashes).
pub fn ct_digest_eq(a: &Digest, b: &Digest) -> bool {
    let mut acc = 0u8;
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        acc |= x ^ y;
    }
    acc == 0
}

// ---------------------------------------------------------------------------
// Nonce

/// 20-byte random challenge/freshness value.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; DIGEST_LEN]);

impl Nonce {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        let mut b = [0u8; DIGEST_LEN];
        rng.fill_bytes(&mut b);
        Nonce(b)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_slice(s: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; DIGEST_LEN] = s.try_into().map_err(|_| CryptoError::Malformed("nonce"))?;
        Ok(Nonce(arr))
    }

    /// Reinterpret as a digest (for salting and extend inputs).
    pub fn into_digest(self) -> Digest {
        Digest(self.0)
    }
}

impl std::fmt::Debug for Nonce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Nonce({})", self.to_hex())
    }
}

// ---------------------------------------------------------------------------
// X25519 (RFC 7748): field arithmetic mod 2^255 - 19 in radix-2^51 limbs.

#[derive(Clone, Copy)]
struct Fe([u64; 5]);

const MASK51: u64 = (1 << 51) - 1;

impl Fe {
    const ZERO: Fe = Fe([0; 5]);
    const ONE: Fe = Fe([1, 0, 0, 0, 0]);

    fn from_bytes(b: &[u8; 32]) -> Fe {
        let load = |off: usize| u64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        Fe([
            load(0) & MASK51,
            (load(6) >> 3) & MASK51,
            (load(12) >> 6) & MASK51,
            (load(19) >> 1) & MASK51,
            (load(24) >> 12) & MASK51,
        ])
    }

    fn to_bytes(self) -> [u8; 32] {
        let mut h = self.carry().0;
        // freeze to the canonical representative: two conditional-subtract
        // passes using the add-19 carry trick (q = 1 iff h >= p)
        for _ in 0..2 {
            let mut t = h;
            t[0] += 19;
            for i in 0..4 {
                t[i + 1] += t[i] >> 51;
                t[i] &= MASK51;
            }
            let q = t[4] >> 51;
            h[0] += 19 * q;
            for i in 0..4 {
                h[i + 1] += h[i] >> 51;
                h[i] &= MASK51;
            }
            h[4] &= MASK51; // drops q * 2^255, completing h - q*p
        }
        let mut out = [0u8; 32];
        let mut acc: u128 = 0;
        let mut bits = 0u32;
        let mut idx = 0usize;
        for limb in h {
            acc |= u128::from(limb) << bits;
            bits += 51;
            while bits >= 8 {
                out[idx] = acc as u8;
                acc >>= 8;
                bits -= 8;
                idx += 1;
            }
        }
        if idx < 32 {
            out[idx] = acc as u8;
        }
        out
    }

    fn carry(mut self) -> Fe {
        for _ in 0..2 {
            let mut c: u64 = 0;
            for i in 0..5 {
                let v = self.0[i] + c;
                self.0[i] = v & MASK51;
                c = v >> 51;
            }
            self.0[0] += c * 19;
        }
        self
    }

    fn add(a: &Fe, b: &Fe) -> Fe {
        let mut r = [0u64; 5];
        for i in 0..5 {
            r[i] = a.0[i] + b.0[i];
        }
        Fe(r).carry()
    }

    fn sub(a: &Fe, b: &Fe) -> Fe {
        // add 2p before subtracting so limbs stay non-negative
        const TWO_P: [u64; 5] = [
            0xF_FFFF_FFFF_FFDA, // 2 * (2^51 - 19)
            0xF_FFFF_FFFF_FFFE, // 2 * (2^51 - 1)
            0xF_FFFF_FFFF_FFFE,
            0xF_FFFF_FFFF_FFFE,
            0xF_FFFF_FFFF_FFFE,
        ];
        let mut r = [0u64; 5];
        for i in 0..5 {
            r[i] = a.0[i] + TWO_P[i] - b.0[i];
        }
        Fe(r).carry()
    }

    fn mul(a: &Fe, b: &Fe) -> Fe {
        let a0 = u128::from(a.0[0]);
        let a1 = u128::from(a.0[1]);
        let a2 = u128::from(a.0[2]);
        let a3 = u128::from(a.0[3]);
        let a4 = u128::from(a.0[4]);
        let b0 = u128::from(b.0[0]);
        let b1 = u128::from(b.0[1]);
        let b2 = u128::from(b.0[2]);
        let b3 = u128::from(b.0[3]);
        let b4 = u128::from(b.0[4]);
        // limbs above index 4 wrap with weight 19 (2^255 = 19 mod p)
        let t0 = a0 * b0 + 19 * (a1 * b4 + a2 * b3 + a3 * b2 + a4 * b1);
        let t1 = a0 * b1 + a1 * b0 + 19 * (a2 * b4 + a3 * b3 + a4 * b2);
        let t2 = a0 * b2 + a1 * b1 + a2 * b0 + 19 * (a3 * b4 + a4 * b3);
        let t3 = a0 * b3 + a1 * b2 + a2 * b1 + a3 * b0 + 19 * (a4 * b4);
        let t4 = a0 * b4 + a1 * b3 + a2 * b2 + a3 * b1 + a4 * b0;
        let t = [t0, t1, t2, t3, t4];
        let mut r = [0u64; 5];
        let mut c: u128 = 0;
        for i in 0..5 {
            let v = t[i] + c;
            r[i] = (v as u64) & MASK51;
            c = v >> 51;
        }
        let mut fe = Fe(r);
        fe.0[0] += (c as u64) * 19;
        fe.carry()
    }

    fn square(&self) -> Fe {
        Fe::mul(self, self)
    }

    fn mul_small(a: &Fe, s: u64) -> Fe {
        let mut r = [0u64; 5];
        let mut c: u128 = 0;
        for i in 0..5 {
            let v = u128::from(a.0[i]) * u128::from(s) + c;
            r[i] = (v as u64) & MASK51;
            c = v >> 51;
        }
        let mut fe = Fe(r);
        fe.0[0] += (c as u64) * 19;
        fe.carry()
    }

    /// Inversion via Fermat: a^(p-2), square-and-multiply MSB first.
    fn invert(&self) -> Fe {
        let mut exp = [0xFFu8; 32]; // p - 2 = 2^255 - 21, little-endian
        exp[0] = 0xEB;
        exp[31] = 0x7F;
        let mut acc = Fe::ONE;
        for bit in (0..255).rev() {
            acc = acc.square();
            if (exp[bit / 8] >> (bit % 8)) & 1 == 1 {
                acc = Fe::mul(&acc, self);
            }
        }
        acc
    }

    fn cswap(swap: u64, a: &mut Fe, b: &mut Fe) {
        let mask = 0u64.wrapping_sub(swap);
        for i in 0..5 {
            let d = mask & (a.0[i] ^ b.0[i]);
            a.0[i] ^= d;
            b.0[i] ^= d;
        }
    }
}

/// RFC 7748 scalar multiplication on Curve25519.
pub fn x25519(scalar: &[u8; 32], point: &[u8; 32]) -> [u8; 32] {
    let mut k = *scalar;
    k[0] &= 248;
    k[31] &= 127;
    k[31] |= 64;
    let mut u = *point;
    u[31] &= 127; // mask the unused high bit per RFC 7748

    let x1 = Fe::from_bytes(&u);
    let mut x2 = Fe::ONE;
    let mut z2 = Fe::ZERO;
    let mut x3 = x1;
    let mut z3 = Fe::ONE;
    let mut swap: u64 = 0;

    for t in (0..255).rev() {
        let kt = u64::from((k[t / 8] >> (t % 8)) & 1);
        swap ^= kt;
        Fe::cswap(swap, &mut x2, &mut x3);
        Fe::cswap(swap, &mut z2, &mut z3);
        swap = kt;

        let a = Fe::add(&x2, &z2);
        let aa = a.square();
        let b = Fe::sub(&x2, &z2);
        let bb = b.square();
        let e = Fe::sub(&aa, &bb);
        let c = Fe::add(&x3, &z3);
        let d = Fe::sub(&x3, &z3);
        let da = Fe::mul(&d, &a);
        let cb = Fe::mul(&c, &b);
        let t0 = Fe::add(&da, &cb);
        x3 = t0.square();
        let t1 = Fe::sub(&da, &cb);
        z3 = Fe::mul(&t1.square(), &x1);
        x2 = Fe::mul(&aa, &bb);
        z2 = Fe::mul(&e, &Fe::add(&aa, &Fe::mul_small(&e, 121665)));
    }
    Fe::cswap(swap, &mut x2, &mut x3);
    Fe::cswap(swap, &mut z2, &mut z3);

    Fe::mul(&x2, &z2.invert()).to_bytes()
}

const X25519_BASE: [u8; 32] = {
    let mut b = [0u8; 32];
    b[0] = 9;
    b
};

// ---------------------------------------------------------------------------
// Keypairs

/// What a keypair is for; recorded for audit/debug output only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyPurpose {
    Pal,
    Proxy,
    Aik,
    Ek,
}

impl KeyPurpose {
    pub fn label(&self) -> &'static str {
        match self {
            KeyPurpose::Pal => "pal",
            KeyPurpose::Proxy => "proxy",
            KeyPurpose::Aik => "aik",
            KeyPurpose::Ek => "ek",
        }
    }
}

/// Public half: encryption key + verifying key.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub enc: [u8; 32],
    pub sig: [u8; 32],
}

impl PublicKey {
    /// The canonical encoding documented in the module header.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.enc).bytes(&self.sig);
        w.finish()
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let enc = r.bytes().map_err(|_| CryptoError::Malformed("public key"))?;
        let sig = r.bytes().map_err(|_| CryptoError::Malformed("public key"))?;
        r.finish().map_err(|_| CryptoError::Malformed("public key"))?;
        Ok(PublicKey {
            enc: enc
                .try_into()
                .map_err(|_| CryptoError::Malformed("public key"))?,
            sig: sig
                .try_into()
                .map_err(|_| CryptoError::Malformed("public key"))?,
        })
    }

    pub fn key_id(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({})", self.key_id().to_hex())
    }
}

/// Private half. Holds the Ed25519 seed rather than an expanded key so the
/// pair serializes compactly into TPM snapshots and sealed blobs.
#[derive(Clone)]
pub struct PrivateKey {
    pub(crate) enc: [u8; 32],
    pub(crate) sig_seed: [u8; 32],
}

impl PrivateKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.enc).bytes(&self.sig_seed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let enc = r.bytes().map_err(|_| CryptoError::Malformed("private key"))?;
        let sig = r.bytes().map_err(|_| CryptoError::Malformed("private key"))?;
        r.finish().map_err(|_| CryptoError::Malformed("private key"))?;
        Ok(PrivateKey {
            enc: enc
                .try_into()
                .map_err(|_| CryptoError::Malformed("private key"))?,
            sig_seed: sig
                .try_into()
                .map_err(|_| CryptoError::Malformed("private key"))?,
        })
    }
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct AsymKeyPair {
    pub purpose: KeyPurpose,
    pub public: PublicKey,
    pub private: PrivateKey,
    pub key_id: Digest,
}

/// Deterministically generate a keypair from the supplied generator.
pub fn generate_keypair(purpose: KeyPurpose, rng: &mut dyn RngCore) -> AsymKeyPair {
    let mut enc_sk = [0u8; 32];
    rng.fill_bytes(&mut enc_sk);
    let mut sig_seed = [0u8; 32];
    rng.fill_bytes(&mut sig_seed);

    let enc_pk = x25519(&enc_sk, &X25519_BASE);
    let kp = ring::signature::Ed25519KeyPair::from_seed_unchecked(&sig_seed)
        .expect("32-byte seed is always accepted");
    let sig_pk: [u8; 32] = kp.public_key().as_ref().try_into().unwrap();

    let public = PublicKey {
        enc: enc_pk,
        sig: sig_pk,
    };
    let key_id = public.key_id();
    AsymKeyPair {
        purpose,
        public,
        private: PrivateKey { enc: enc_sk, sig_seed },
        key_id,
    }
}

// ---------------------------------------------------------------------------
// Hybrid encryption

const ECIES_TAG: &[u8] = b"titm-ecies-v1";

fn aead_key_for(shared: &[u8; 32], eph_pub: &[u8; 32], recip_pub: &[u8; 32]) -> [u8; 32] {
    let mut ikm = Vec::with_capacity(ECIES_TAG.len() + 96);
    ikm.extend_from_slice(ECIES_TAG);
    ikm.extend_from_slice(shared);
    ikm.extend_from_slice(eph_pub);
    ikm.extend_from_slice(recip_pub);
    sha256(&ikm)
}

/// Authenticated symmetric encryption (ChaCha20-Poly1305); the caller is
/// responsible for nonce uniqueness per key.
pub(crate) fn sym_seal(key: &[u8; 32], nonce: [u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let unbound = ring::aead::UnboundKey::new(&ring::aead::CHACHA20_POLY1305, key).unwrap();
    let sealing = ring::aead::LessSafeKey::new(unbound);
    let nonce = ring::aead::Nonce::assume_unique_for_key(nonce);
    let mut buf = plaintext.to_vec();
    sealing
        .seal_in_place_append_tag(nonce, ring::aead::Aad::from(aad), &mut buf)
        .unwrap();
    buf
}

pub(crate) fn sym_open(
    key: &[u8; 32],
    nonce: [u8; 12],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let unbound = ring::aead::UnboundKey::new(&ring::aead::CHACHA20_POLY1305, key).unwrap();
    let opening = ring::aead::LessSafeKey::new(unbound);
    let nonce = ring::aead::Nonce::assume_unique_for_key(nonce);
    let mut buf = ciphertext.to_vec();
    let plain = opening
        .open_in_place(nonce, ring::aead::Aad::from(aad), &mut buf)
        .map_err(|_| CryptoError::Integrity)?;
    Ok(plain.to_vec())
}

fn aead_seal(key: &[u8; 32], plaintext: &[u8]) -> Vec<u8> {
    // the key is unique per ephemeral exchange, so a fixed nonce is sound
    sym_seal(key, [0u8; 12], ECIES_TAG, plaintext)
}

fn aead_open(key: &[u8; 32], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    sym_open(key, [0u8; 12], ECIES_TAG, ciphertext)
}

/// Randomized hybrid encryption under a public key.
///
/// Layout: 32-byte ephemeral X25519 public key, then the AEAD ciphertext
/// (plaintext length + 16-byte tag).
pub fn encrypt(public: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
    let mut eph_sk = [0u8; 32];
    rng.fill_bytes(&mut eph_sk);
    let eph_pub = x25519(&eph_sk, &X25519_BASE);
    let shared = x25519(&eph_sk, &public.enc);
    let key = aead_key_for(&shared, &eph_pub, &public.enc);
    let mut out = Vec::with_capacity(32 + plaintext.len() + 16);
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&aead_seal(&key, plaintext));
    out
}

/// Inverse of [`encrypt`]; any corruption or wrong key yields `Integrity`.
pub fn decrypt(private: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < 32 + 16 {
        return Err(CryptoError::Integrity);
    }
    let eph_pub: [u8; 32] = ciphertext[..32].try_into().unwrap();
    let my_pub = x25519(&private.enc, &X25519_BASE);
    let shared = x25519(&private.enc, &eph_pub);
    let key = aead_key_for(&shared, &eph_pub, &my_pub);
    aead_open(&key, &ciphertext[32..])
}

// ---------------------------------------------------------------------------
// Signatures

pub fn sign(private: &PrivateKey, message: &[u8]) -> Vec<u8> {
    let kp = ring::signature::Ed25519KeyPair::from_seed_unchecked(&private.sig_seed)
        .expect("32-byte seed is always accepted");
    kp.sign(message).as_ref().to_vec()
}

pub fn verify(public: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
    let pk = ring::signature::UnparsedPublicKey::new(&ring::signature::ED25519, &public.sig);
    pk.verify(message, signature).is_ok()
}

// ---------------------------------------------------------------------------
// Certificates (single-level, issued by the harness certificate authority,
// which also stands in for the attestation-identity privacy CA)

#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_id: String,
    pub subject: PublicKey,
    pub signature: Vec<u8>,
}

const CERT_TAG: &[u8] = b"titm-cert-v1";

fn cert_signed_bytes(subject_id: &str, subject: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(CERT_TAG).str(subject_id).bytes(&subject.canonical_bytes());
    w.finish()
}

impl Certificate {
    pub fn issue(ca: &AsymKeyPair, subject_id: &str, subject: &PublicKey) -> Certificate {
        let signature = sign(&ca.private, &cert_signed_bytes(subject_id, subject));
        Certificate {
            subject_id: subject_id.to_string(),
            subject: subject.clone(),
            signature,
        }
    }

    pub fn verify(&self, ca_pub: &PublicKey) -> Result<(), CryptoError> {
        if verify(
            ca_pub,
            &cert_signed_bytes(&self.subject_id, &self.subject),
            &self.signature,
        ) {
            Ok(())
        } else {
            Err(CryptoError::BadCertificate("issuer signature does not verify"))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(&self.subject_id)
            .bytes(&self.subject.canonical_bytes())
            .bytes(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Certificate, CryptoError> {
        let mut r = Reader::new(bytes);
        let subject_id = r.str().map_err(|_| CryptoError::Malformed("certificate"))?;
        let subject_bytes = r.bytes().map_err(|_| CryptoError::Malformed("certificate"))?;
        let signature = r.bytes().map_err(|_| CryptoError::Malformed("certificate"))?;
        r.finish().map_err(|_| CryptoError::Malformed("certificate"))?;
        Ok(Certificate {
            subject_id,
            subject: PublicKey::from_canonical(&subject_bytes)?,
            signature,
        })
    }
}

impl std::fmt::Debug for Certificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Certificate(subject={})", self.subject_id)
    }
}

/// Best-effort scrub of transient secret buffers. Advisory only: run-time
/// memory attacks are outside this system's threat model, but persisted and
/// transmitted bytes must never contain plaintext secrets.
pub fn scrub(buf: &mut [u8]) {
    for b in buf.iter_mut() {
        // volatile write so the loop is not optimized away
        unsafe { std::ptr::write_volatile(b, 0) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(1234)
    }

    #[test]
    fn sha1_standard_vectors() {
        assert_eq!(hash(b"").to_hex(), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
        assert_eq!(hash(b"abc").to_hex(), "a9993e364706816aba3e25717850c26c9cd0d89d");
        assert_eq!(
            hash(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq").to_hex(),
            "84983e441c3bd26ebaae4aa1f95129e5e54670f1"
        );
    }

    #[test]
    fn sha1_of_sha1_matches_independent_oracle() {
        // value computed with an independent implementation before the build
        let inner = hash(b"abc");
        assert_eq!(
            hash(inner.as_bytes()).to_hex(),
            "0d3ced9bec10a777aec23ccc353a8c08a633045e"
        );
    }

    #[test]
    fn x25519_rfc7748_vector_1() {
        let k: [u8; 32] =
            hex::decode("a546e36bf0527c9d3b16154b82465edd62144c0ac1fc5a18506a2244ba449ac4")
                .unwrap()
                .try_into()
                .unwrap();
        let u: [u8; 32] =
            hex::decode("e6db6867583030db3594c1a424b15f7c726624ec26b3353b10a903a6d0ab1c4c")
                .unwrap()
                .try_into()
                .unwrap();
        assert_eq!(
            hex::encode(x25519(&k, &u)),
            "c3da55379de9c6908e94ea4df28d084f32eccf03491c71f754b4075577a28552"
        );
    }

    #[test]
    fn x25519_rfc7748_vector_2() {
        let k: [u8; 32] =
            hex::decode("4b66e9d4d1b4673c5ad22691957d6af5c11b6421e0ea01d42ca4169e7918ba0d")
                .unwrap()
                .try_into()
                .unwrap();
        let u: [u8; 32] =
            hex::decode("e5210f12786811d3f4b7959d0538ae2c31dbe7106fc03c3efc4cd549c715a493")
                .unwrap()
                .try_into()
                .unwrap();
        assert_eq!(
            hex::encode(x25519(&k, &u)),
            "95cbde9476e8907d7aade45cb4b873f88b595a68799fa152e6f8f7647aac7957"
        );
    }

    #[test]
    fn x25519_rfc7748_iterated() {
        let base = X25519_BASE;
        let mut k = base;
        let mut u = base;
        // one iteration
        let r = x25519(&k, &u);
        assert_eq!(
            hex::encode(r),
            "422c8e7a6227d7bca1350b3e2bb7279f7897b87bb6854b783c60e80311ae3079"
        );
        // one thousand iterations
        u = k;
        k = r;
        for _ in 0..999 {
            let next = x25519(&k, &u);
            u = k;
            k = next;
        }
        assert_eq!(
            hex::encode(k),
            "684cf59ba83309552800ef566f2f4d3c1c3887c49360e3875f2eb94d99532c51"
        );
    }

    #[test]
    fn x25519_agreement_fixture() {
        // independent-oracle fixture: both directions agree on the shared point
        let sk_a: [u8; 32] = (0u8..32).collect::<Vec<_>>().try_into().unwrap();
        let sk_b: [u8; 32] = (100u8..132).collect::<Vec<_>>().try_into().unwrap();
        let pk_a = x25519(&sk_a, &X25519_BASE);
        let pk_b = x25519(&sk_b, &X25519_BASE);
        assert_eq!(
            hex::encode(pk_a),
            "8f40c5adb68f25624ae5b214ea767a6ec94d829d3d7b5e1ad1ba6f3e2138285f"
        );
        assert_eq!(
            hex::encode(pk_b),
            "7d9c24316539825c1896e57f28197746793ce60cbee3ad47da9d07b85fa55e2a"
        );
        let s1 = x25519(&sk_a, &pk_b);
        let s2 = x25519(&sk_b, &pk_a);
        assert_eq!(s1, s2);
        assert_eq!(
            hex::encode(s1),
            "3ae143fb898911b4591769dc17ca01775cc4cad4d05b8f33a39c79e30fa63a72"
        );
    }

    #[test]
    fn ed25519_rfc8032_test1() {
        // RFC 8032 section 7.1 TEST 1: empty message
        let seed: [u8; 32] =
            hex::decode("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
                .unwrap()
                .try_into()
                .unwrap();
        let kp = ring::signature::Ed25519KeyPair::from_seed_unchecked(&seed).unwrap();
        assert_eq!(
            hex::encode(kp.public_key().as_ref()),
            "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
        );
        let sig = kp.sign(b"");
        assert_eq!(
            hex::encode(sig.as_ref()),
            "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155\
             5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
        );
    }

    #[test]
    fn keypair_freshness_and_key_id() {
        let mut r = rng();
        let a = generate_keypair(KeyPurpose::Pal, &mut r);
        let b = generate_keypair(KeyPurpose::Pal, &mut r);
        assert_ne!(a.key_id, b.key_id);
        assert_eq!(a.key_id, hash(&a.public.canonical_bytes()));
    }

    #[test]
    fn encrypt_decrypt_round_trip() {
        let mut r = rng();
        let k = generate_keypair(KeyPurpose::Proxy, &mut r);
        let ct = encrypt(&k.public, b"secret", &mut r);
        assert_eq!(decrypt(&k.private, &ct).unwrap(), b"secret");
        // one-byte plaintext
        let ct1 = encrypt(&k.public, b"x", &mut r);
        assert_eq!(decrypt(&k.private, &ct1).unwrap(), b"x");
    }

    #[test]
    fn encryption_is_randomized() {
        let mut r = rng();
        let k = generate_keypair(KeyPurpose::Proxy, &mut r);
        let c1 = encrypt(&k.public, b"same plaintext", &mut r);
        let c2 = encrypt(&k.public, b"same plaintext", &mut r);
        assert_ne!(c1, c2);
    }

    #[test]
    fn wrong_key_rejected() {
        let mut r = rng();
        let k = generate_keypair(KeyPurpose::Proxy, &mut r);
        let other = generate_keypair(KeyPurpose::Proxy, &mut r);
        let ct = encrypt(&k.public, b"secret", &mut r);
        assert_eq!(decrypt(&other.private, &ct).unwrap_err(), CryptoError::Integrity);
    }

    #[test]
    fn every_byte_corruption_rejected() {
        // exhaustive single-byte corruption sweep on a small ciphertext
        let mut r = rng();
        let k = generate_keypair(KeyPurpose::Proxy, &mut r);
        let ct = encrypt(&k.public, b"tiny", &mut r);
        for i in 0..ct.len() {
            let mut bad = ct.clone();
            bad[i] ^= 0x01;
            assert_eq!(
                decrypt(&k.private, &bad).unwrap_err(),
                CryptoError::Integrity,
                "corruption at byte {i} was accepted"
            );
        }
    }

    #[test]
    fn signature_binding() {
        let mut r = rng();
        let k = generate_keypair(KeyPurpose::Aik, &mut r);
        let other = generate_keypair(KeyPurpose::Aik, &mut r);
        let sig = sign(&k.private, b"m");
        assert!(verify(&k.public, b"m", &sig));
        assert!(!verify(&other.public, b"m", &sig));
        assert!(!verify(&k.public, b"m2", &sig));
    }

    #[test]
    fn certificate_round_trip_and_verification() {
        let mut r = rng();
        let ca = generate_keypair(KeyPurpose::Ek, &mut r);
        let subj = generate_keypair(KeyPurpose::Aik, &mut r);
        let cert = Certificate::issue(&ca, "tpm-aik", &subj.public);
        cert.verify(&ca.public).unwrap();
        let decoded = Certificate::decode(&cert.encode()).unwrap();
        assert_eq!(decoded, cert);
        let wrong_ca = generate_keypair(KeyPurpose::Ek, &mut r);
        assert!(decoded.verify(&wrong_ca.public).is_err());
    }

    #[test]
    fn determinism_under_fixed_seed() {
        let mut r1 = rng();
        let mut r2 = rng();
        let k1 = generate_keypair(KeyPurpose::Pal, &mut r1);
        let k2 = generate_keypair(KeyPurpose::Pal, &mut r2);
        assert_eq!(k1.public.canonical_bytes(), k2.public.canonical_bytes());
        let c1 = encrypt(&k1.public, b"payload", &mut r1);
        let c2 = encrypt(&k2.public, b"payload", &mut r2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn nonce_collision_free_over_many_draws() {
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100_000 {
            assert!(seen.insert(Nonce::generate(&mut r).0));
        }
    }
}
