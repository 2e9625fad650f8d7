//! TPM 1.2 emulator: PCR bank, Extend, DRTM launch, Seal/Unseal bound to
//! PCR snapshots, and AIK Quotes with verifiable measurement logs.
//!
//! The emulator reproduces the trust semantics the rest of the system
//! depends on, not the TPM command byte stream:
//!
//! - 24 platform configuration registers, each a 20-byte digest starting
//!   all-zero, mutable only through `extend` (new = H(old || measurement))
//!   or through the DRTM reset of register 18.
//! - Sealing encrypts under an emulator-internal storage root key and binds
//!   the blob to `(pcr_index, value-at-seal)` via the authenticated header;
//!   unsealing succeeds only on the same emulator with the register back at
//!   the sealed value.
//! - Quotes sign `(pcr value, nonce)` under an attestation identity key
//!   certified at construction by the certificate authority standing in for
//!   a privacy CA. `verify_quote` is a free function: the verifier has no
//!   access to a live register bank, only to the quote, the expected nonce,
//!   the untrusted measurement log, and the CA public key.
//!
//! Per-register measurement logs restart when DRTM resets the register, so
//! replaying a log from the all-zero state always reproduces the register's
//! live value.
//!
//! The emulator is one stateful entity; callers that share it across
//! threads wrap it in a single mutex ([`SharedTpm`]). Emulator state
//! serializes to a versioned snapshot so a harness can checkpoint worlds.

use std::sync::Arc;

use parking_lot::Mutex;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::crypto::{
    self, hash, AsymKeyPair, Certificate, CryptoError, Digest, KeyPurpose, Nonce, PublicKey,
    DIGEST_LEN,
};
use crate::wire::{Reader, Writer};

pub const PCR_COUNT: usize = 24;
/// Register reset and measured by DRTM launch.
pub const PCR_DRTM: u8 = 18;
/// Register the proxy extends with its key digest before initial sealing.
pub const PCR_PROXY_KEY: u8 = 15;
/// Log label of the launch's own measurement of the kernel image.
pub const LOG_LABEL_DRTM: &str = "drtm:pal";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TpmError {
    #[error("pcr index {0} out of range")]
    PcrIndex(u8),
    #[error("unseal refused: pcr {index} is {live}, blob was sealed at {sealed}")]
    SealViolation {
        index: u8,
        live: Digest,
        sealed: Digest,
    },
    #[error("unseal refused: blob was sealed by a different emulator")]
    UnknownBlob,
    #[error("unseal refused: blob failed integrity verification")]
    BlobIntegrity,
    #[error("drtm launch refused: another drtm session is active")]
    DrtmBusy,
    #[error("no drtm session is active")]
    DrtmNotActive,
    #[error("snapshot malformed: {0}")]
    Snapshot(&'static str),
}

// ---------------------------------------------------------------------------
// Measurement log

/// Ordered, untrusted list of (label, measurement) pairs for one register.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MeasurementLog {
    pub entries: Vec<(String, Digest)>,
}

impl MeasurementLog {
    /// Replay the extend rule from the all-zero base state.
    pub fn replay(&self) -> Digest {
        let mut acc = Digest::ZERO;
        for (_, m) in &self.entries {
            acc = extend_digest(&acc, m);
        }
        acc
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.entries.len() as u32);
        for (label, digest) in &self.entries {
            w.str(label).raw(digest.as_bytes());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let log = Self::decode_from(&mut r)?;
        r.finish().map_err(|_| CryptoError::Malformed("measurement log"))?;
        Ok(log)
    }

    pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Self, CryptoError> {
        let count = r.u32().map_err(|_| CryptoError::Malformed("measurement log"))?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let label = r.str().map_err(|_| CryptoError::Malformed("measurement log"))?;
            let digest = Digest::from_slice(
                r.raw(DIGEST_LEN)
                    .map_err(|_| CryptoError::Malformed("measurement log"))?,
            )?;
            entries.push((label, digest));
        }
        Ok(MeasurementLog { entries })
    }
}

/// The extend rule: new = H(old || measurement).
pub fn extend_digest(old: &Digest, measurement: &Digest) -> Digest {
    let mut buf = [0u8; DIGEST_LEN * 2];
    buf[..DIGEST_LEN].copy_from_slice(old.as_bytes());
    buf[DIGEST_LEN..].copy_from_slice(measurement.as_bytes());
    hash(&buf)
}

// ---------------------------------------------------------------------------
// Sealed blobs

/// Ciphertext bound to a PCR snapshot on one emulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub pcr_index: u8,
    pub pcr_value_at_seal: Digest,
    pub seal_id: Nonce,
}

impl SealedBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.ciphertext)
            .u8(self.pcr_index)
            .raw(self.pcr_value_at_seal.as_bytes())
            .raw(self.seal_id.as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let ciphertext = r.bytes().map_err(|_| CryptoError::Malformed("sealed blob"))?;
        let pcr_index = r.u8().map_err(|_| CryptoError::Malformed("sealed blob"))?;
        let pcr_value_at_seal = Digest::from_slice(
            r.raw(DIGEST_LEN)
                .map_err(|_| CryptoError::Malformed("sealed blob"))?,
        )?;
        let seal_id = Nonce::from_slice(
            r.raw(DIGEST_LEN)
                .map_err(|_| CryptoError::Malformed("sealed blob"))?,
        )?;
        r.finish().map_err(|_| CryptoError::Malformed("sealed blob"))?;
        Ok(SealedBlob {
            ciphertext,
            pcr_index,
            pcr_value_at_seal,
            seal_id,
        })
    }
}

// ---------------------------------------------------------------------------
// Quotes

/// Signed attestation statement over one register and a challenge nonce.
#[derive(Clone, Debug, PartialEq)]
pub struct Quote {
    pub pcr_index: u8,
    pub pcr_value: Digest,
    pub nonce: Nonce,
    pub signature: Vec<u8>,
    pub aik_cert: Certificate,
}

const QUOTE_TAG: &[u8] = b"titm-quote-v1";

fn quote_signed_bytes(pcr_index: u8, pcr_value: &Digest, nonce: &Nonce) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(QUOTE_TAG)
        .u8(pcr_index)
        .raw(pcr_value.as_bytes())
        .raw(nonce.as_bytes());
    w.finish()
}

impl Quote {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.pcr_index)
            .raw(self.pcr_value.as_bytes())
            .raw(self.nonce.as_bytes())
            .bytes(&self.signature)
            .bytes(&self.aik_cert.encode());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let pcr_index = r.u8().map_err(|_| CryptoError::Malformed("quote"))?;
        let pcr_value = Digest::from_slice(
            r.raw(DIGEST_LEN).map_err(|_| CryptoError::Malformed("quote"))?,
        )?;
        let nonce = Nonce::from_slice(
            r.raw(DIGEST_LEN).map_err(|_| CryptoError::Malformed("quote"))?,
        )?;
        let signature = r.bytes().map_err(|_| CryptoError::Malformed("quote"))?;
        let cert_bytes = r.bytes().map_err(|_| CryptoError::Malformed("quote"))?;
        r.finish().map_err(|_| CryptoError::Malformed("quote"))?;
        Ok(Quote {
            pcr_index,
            pcr_value,
            nonce,
            signature,
            aik_cert: Certificate::decode(&cert_bytes)?,
        })
    }
}

/// Why a quote was rejected; the verifier's structured rejection detail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuoteRejection {
    /// The AIK certificate does not verify under the given CA key.
    BadCertificate,
    /// The signature over (pcr value, nonce) does not verify.
    BadSignature,
    /// The quoted nonce is not the challenge we issued (replay).
    StaleNonce { quoted: Nonce, expected: Nonce },
    /// Replaying the measurement log does not reproduce the quoted value.
    LogMismatch { replayed: Digest, quoted: Digest },
}

impl std::fmt::Display for QuoteRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuoteRejection::BadCertificate => write!(f, "aik certificate rejected"),
            QuoteRejection::BadSignature => write!(f, "quote signature rejected"),
            QuoteRejection::StaleNonce { .. } => write!(f, "quote nonce is stale"),
            QuoteRejection::LogMismatch { replayed, quoted } => {
                write!(f, "log replays to {replayed}, quote claims {quoted}")
            }
        }
    }
}

impl std::error::Error for QuoteRejection {}

/// Verifier-side quote validation. Pure: touches no live register bank.
///
/// Checks, in order: the AIK certificate chains to `ca_pub`; the signature
/// covers the quoted value and nonce; the nonce is the expected challenge;
/// replaying `log` from the all-zero base reproduces the quoted value.
pub fn verify_quote(
    quote: &Quote,
    expected_nonce: &Nonce,
    log: &MeasurementLog,
    ca_pub: &PublicKey,
) -> Result<(), QuoteRejection> {
    if quote.aik_cert.verify(ca_pub).is_err() {
        return Err(QuoteRejection::BadCertificate);
    }
    let signed = quote_signed_bytes(quote.pcr_index, &quote.pcr_value, &quote.nonce);
    if !crypto::verify(&quote.aik_cert.subject, &signed, &quote.signature) {
        return Err(QuoteRejection::BadSignature);
    }
    if quote.nonce != *expected_nonce {
        return Err(QuoteRejection::StaleNonce {
            quoted: quote.nonce,
            expected: *expected_nonce,
        });
    }
    let replayed = log.replay();
    if replayed != quote.pcr_value {
        return Err(QuoteRejection::LogMismatch {
            replayed,
            quoted: quote.pcr_value,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Emulator

/// Open/close events for DRTM sessions, kept so tests can assert that
/// launches never interleave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrtmEvent {
    Open(u64),
    Close(u64),
}

pub struct TpmEmulator {
    emu_id: [u8; 16],
    srk: [u8; 32],
    aik: AsymKeyPair,
    aik_cert: Certificate,
    pcrs: [Digest; PCR_COUNT],
    logs: Vec<MeasurementLog>,
    drtm_open: bool,
    event_seq: u64,
    drtm_events: Vec<DrtmEvent>,
    // diagnostic trace of every register change; not part of snapshots
    pcr_history: Vec<PcrEvent>,
    rng: rand_chacha::ChaCha20Rng,
}

/// One register change: an extend or a DRTM reset, with the resulting value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcrEvent {
    pub pcr_index: u8,
    pub label: String,
    pub value: Digest,
}

/// The one-mutex sharing contract for the emulator.
pub type SharedTpm = Arc<Mutex<TpmEmulator>>;

const SEAL_NONCE_TAG: &[u8] = b"titm-seal-nonce";
const SEAL_AAD_TAG: &[u8] = b"titm-seal-aad-v1";

impl TpmEmulator {
    /// Build a fresh emulator: zero PCRs, new storage root key, and an AIK
    /// certified by `ca` (the harness certificate authority).
    pub fn new(ca: &AsymKeyPair, mut rng: rand_chacha::ChaCha20Rng) -> TpmEmulator {
        let mut emu_id = [0u8; 16];
        rng.fill_bytes(&mut emu_id);
        let mut srk = [0u8; 32];
        rng.fill_bytes(&mut srk);
        let aik = crypto::generate_keypair(KeyPurpose::Aik, &mut rng);
        let aik_cert = Certificate::issue(ca, &format!("aik-{}", hex::encode(&emu_id[..4])), &aik.public);
        TpmEmulator {
            emu_id,
            srk,
            aik,
            aik_cert,
            pcrs: [Digest::ZERO; PCR_COUNT],
            logs: vec![MeasurementLog::default(); PCR_COUNT],
            drtm_open: false,
            event_seq: 0,
            drtm_events: Vec::new(),
            pcr_history: Vec::new(),
            rng,
        }
    }

    pub fn aik_cert(&self) -> &Certificate {
        &self.aik_cert
    }

    /// Deterministic entropy for code running inside a DRTM session; the
    /// security kernel has no other randomness source.
    pub fn rng_mut(&mut self) -> &mut rand_chacha::ChaCha20Rng {
        &mut self.rng
    }

    pub fn drtm_is_open(&self) -> bool {
        self.drtm_open
    }

    /// Every register change so far, oldest first (diagnostic trace).
    pub fn pcr_history(&self) -> &[PcrEvent] {
        &self.pcr_history
    }

    pub fn pcr(&self, index: u8) -> Result<Digest, TpmError> {
        let i = usize::from(index);
        if i >= PCR_COUNT {
            return Err(TpmError::PcrIndex(index));
        }
        Ok(self.pcrs[i])
    }

    /// The untrusted measurement log for one register.
    pub fn sml(&self, index: u8) -> Result<MeasurementLog, TpmError> {
        let i = usize::from(index);
        if i >= PCR_COUNT {
            return Err(TpmError::PcrIndex(index));
        }
        Ok(self.logs[i].clone())
    }

    /// Extend a register: new = H(old || measurement). Returns the new value.
    pub fn extend(&mut self, index: u8, label: &str, measurement: &Digest) -> Result<Digest, TpmError> {
        let i = usize::from(index);
        if i >= PCR_COUNT {
            return Err(TpmError::PcrIndex(index));
        }
        self.pcrs[i] = extend_digest(&self.pcrs[i], measurement);
        self.logs[i].entries.push((label.to_string(), *measurement));
        self.pcr_history.push(PcrEvent {
            pcr_index: index,
            label: label.to_string(),
            value: self.pcrs[i],
        });
        Ok(self.pcrs[i])
    }

    /// Model a platform reboot: every register and log returns to the
    /// power-on state and any open launch session is torn down. Sealed
    /// state survives — the storage root key is persistent — so blobs
    /// unseal again once the bound register is rebuilt to its sealed value.
    pub fn platform_reset(&mut self) {
        for pcr in &mut self.pcrs {
            *pcr = Digest::ZERO;
        }
        for log in &mut self.logs {
            log.entries.clear();
        }
        self.drtm_open = false;
        self.event_seq = 0;
        self.drtm_events.clear();
        self.pcr_history.clear();
    }

    /// Dynamic launch: reset register 18 (and its log), measure the image
    /// into it, and open the exclusive session.
    pub fn drtm_launch(&mut self, pal_image: &[u8]) -> Result<Digest, TpmError> {
        if self.drtm_open {
            return Err(TpmError::DrtmBusy);
        }
        self.drtm_open = true;
        self.event_seq += 1;
        self.drtm_events.push(DrtmEvent::Open(self.event_seq));
        let i = usize::from(PCR_DRTM);
        self.pcrs[i] = Digest::ZERO;
        self.logs[i] = MeasurementLog::default();
        self.pcr_history.push(PcrEvent {
            pcr_index: PCR_DRTM,
            label: "drtm:reset".to_string(),
            value: Digest::ZERO,
        });
        self.extend(PCR_DRTM, LOG_LABEL_DRTM, &hash(pal_image))
    }

    /// Close the DRTM session opened by [`Self::drtm_launch`].
    pub fn drtm_close(&mut self) -> Result<(), TpmError> {
        if !self.drtm_open {
            return Err(TpmError::DrtmNotActive);
        }
        self.drtm_open = false;
        self.event_seq += 1;
        self.drtm_events.push(DrtmEvent::Close(self.event_seq));
        Ok(())
    }

    pub fn drtm_events(&self) -> &[DrtmEvent] {
        &self.drtm_events
    }

    fn seal_aad(&self, pcr_index: u8, pcr_value: &Digest, seal_id: &Nonce) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(SEAL_AAD_TAG)
            .raw(&self.emu_id)
            .u8(pcr_index)
            .raw(pcr_value.as_bytes())
            .raw(seal_id.as_bytes());
        w.finish()
    }

    fn seal_nonce(seal_id: &Nonce) -> [u8; 12] {
        let mut ikm = Vec::with_capacity(SEAL_NONCE_TAG.len() + DIGEST_LEN);
        ikm.extend_from_slice(SEAL_NONCE_TAG);
        ikm.extend_from_slice(seal_id.as_bytes());
        crypto::sha256(&ikm)[..12].try_into().unwrap()
    }

    /// Bind `plaintext` to the current value of `pcr_index`.
    pub fn seal(&mut self, plaintext: &[u8], pcr_index: u8) -> Result<SealedBlob, TpmError> {
        let pcr_value = self.pcr(pcr_index)?;
        let seal_id = Nonce::generate(&mut self.rng);
        let aad = self.seal_aad(pcr_index, &pcr_value, &seal_id);
        let mut ciphertext = Vec::with_capacity(16 + plaintext.len() + 16);
        ciphertext.extend_from_slice(&self.emu_id);
        ciphertext.extend_from_slice(&crypto::sym_seal(
            &self.srk,
            Self::seal_nonce(&seal_id),
            &aad,
            plaintext,
        ));
        Ok(SealedBlob {
            ciphertext,
            pcr_index,
            pcr_value_at_seal: pcr_value,
            seal_id,
        })
    }

    /// Recover sealed plaintext; fails unless the blob is ours and the bound
    /// register currently holds the sealed value.
    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TpmError> {
        if blob.ciphertext.len() < 16 {
            return Err(TpmError::BlobIntegrity);
        }
        if blob.ciphertext[..16] != self.emu_id {
            return Err(TpmError::UnknownBlob);
        }
        let live = self.pcr(blob.pcr_index)?;
        if live != blob.pcr_value_at_seal {
            return Err(TpmError::SealViolation {
                index: blob.pcr_index,
                live,
                sealed: blob.pcr_value_at_seal,
            });
        }
        let aad = self.seal_aad(blob.pcr_index, &blob.pcr_value_at_seal, &blob.seal_id);
        crypto::sym_open(
            &self.srk,
            Self::seal_nonce(&blob.seal_id),
            &aad,
            &blob.ciphertext[16..],
        )
        .map_err(|_| TpmError::BlobIntegrity)
    }

    /// Sign the live value of a register together with a challenge nonce.
    pub fn quote(&self, pcr_index: u8, nonce: &Nonce) -> Result<Quote, TpmError> {
        let pcr_value = self.pcr(pcr_index)?;
        let signature =
            crypto::sign(&self.aik.private, &quote_signed_bytes(pcr_index, &pcr_value, nonce));
        Ok(Quote {
            pcr_index,
            pcr_value,
            nonce: *nonce,
            signature,
            aik_cert: self.aik_cert.clone(),
        })
    }

    /// Fresh randomness from the emulator's deterministic source.
    pub fn random_nonce(&mut self) -> Nonce {
        Nonce::generate(&mut self.rng)
    }

    // -- snapshots ----------------------------------------------------------

    const SNAPSHOT_MAGIC: &'static [u8] = b"TIMS";
    const SNAPSHOT_VERSION: u8 = 1;

    /// Serialize the full emulator state (keys, registers, logs, generator).
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(Self::SNAPSHOT_MAGIC).u8(Self::SNAPSHOT_VERSION);
        w.raw(&self.emu_id).raw(&self.srk);
        w.bytes(&self.aik.private.to_bytes());
        w.bytes(&self.aik.public.canonical_bytes());
        w.bytes(&self.aik_cert.encode());
        for pcr in &self.pcrs {
            w.raw(pcr.as_bytes());
        }
        w.u32(self.logs.len() as u32);
        for log in &self.logs {
            w.bytes(&log.encode());
        }
        w.u8(u8::from(self.drtm_open));
        w.u64(self.event_seq);
        w.u32(self.drtm_events.len() as u32);
        for ev in &self.drtm_events {
            match ev {
                DrtmEvent::Open(s) => w.u8(1).u64(*s),
                DrtmEvent::Close(s) => w.u8(0).u64(*s),
            };
        }
        w.raw(&self.rng.get_seed());
        let pos = self.rng.get_word_pos();
        w.u64((pos >> 64) as u64).u64(pos as u64);
        w.finish()
    }

    /// Rebuild an emulator from [`Self::snapshot`] output.
    pub fn restore(bytes: &[u8]) -> Result<TpmEmulator, TpmError> {
        let fail = |_| TpmError::Snapshot("truncated");
        let mut r = Reader::new(bytes);
        if r.raw(4).map_err(fail)? != Self::SNAPSHOT_MAGIC {
            return Err(TpmError::Snapshot("bad magic"));
        }
        if r.u8().map_err(fail)? != Self::SNAPSHOT_VERSION {
            return Err(TpmError::Snapshot("unsupported version"));
        }
        let emu_id: [u8; 16] = r.raw(16).map_err(fail)?.try_into().unwrap();
        let srk: [u8; 32] = r.raw(32).map_err(fail)?.try_into().unwrap();
        let aik_private = crypto::PrivateKey::from_bytes(&r.bytes().map_err(fail)?)
            .map_err(|_| TpmError::Snapshot("aik private key"))?;
        let aik_public = PublicKey::from_canonical(&r.bytes().map_err(fail)?)
            .map_err(|_| TpmError::Snapshot("aik public key"))?;
        let aik_cert = Certificate::decode(&r.bytes().map_err(fail)?)
            .map_err(|_| TpmError::Snapshot("aik certificate"))?;
        let mut pcrs = [Digest::ZERO; PCR_COUNT];
        for pcr in pcrs.iter_mut() {
            *pcr = Digest::from_slice(r.raw(DIGEST_LEN).map_err(fail)?)
                .map_err(|_| TpmError::Snapshot("pcr"))?;
        }
        let log_count = r.u32().map_err(fail)?;
        if log_count as usize != PCR_COUNT {
            return Err(TpmError::Snapshot("log count"));
        }
        let mut logs = Vec::with_capacity(PCR_COUNT);
        for _ in 0..PCR_COUNT {
            logs.push(
                MeasurementLog::decode(&r.bytes().map_err(fail)?)
                    .map_err(|_| TpmError::Snapshot("log"))?,
            );
        }
        let drtm_open = r.u8().map_err(fail)? == 1;
        let event_seq = r.u64().map_err(fail)?;
        let ev_count = r.u32().map_err(fail)?;
        let mut drtm_events = Vec::with_capacity(ev_count as usize);
        for _ in 0..ev_count {
            let kind = r.u8().map_err(fail)?;
            let seq = r.u64().map_err(fail)?;
            drtm_events.push(if kind == 1 {
                DrtmEvent::Open(seq)
            } else {
                DrtmEvent::Close(seq)
            });
        }
        let seed: [u8; 32] = r.raw(32).map_err(fail)?.try_into().unwrap();
        let pos_hi = r.u64().map_err(fail)?;
        let pos_lo = r.u64().map_err(fail)?;
        r.finish().map_err(|_| TpmError::Snapshot("trailing bytes"))?;
        let mut rng = rand_chacha::ChaCha20Rng::from_seed(seed);
        rng.set_word_pos((u128::from(pos_hi) << 64) | u128::from(pos_lo));
        let key_id = aik_public.key_id();
        Ok(TpmEmulator {
            emu_id,
            srk,
            aik: AsymKeyPair {
                purpose: KeyPurpose::Aik,
                public: aik_public,
                private: aik_private,
                key_id,
            },
            aik_cert,
            pcrs,
            logs,
            drtm_open,
            event_seq,
            drtm_events,
            pcr_history: Vec::new(),
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;

    fn ca_and_tpm(seed: u64) -> (AsymKeyPair, TpmEmulator) {
        let mut ca_rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = crypto::generate_keypair(KeyPurpose::Ek, &mut ca_rng);
        let tpm = TpmEmulator::new(&ca, ChaCha20Rng::seed_from_u64(seed + 1));
        (ca, tpm)
    }

    #[test]
    fn registers_start_all_zero() {
        let (_, tpm) = ca_and_tpm(1);
        for i in 0..PCR_COUNT as u8 {
            assert_eq!(tpm.pcr(i).unwrap(), Digest::ZERO);
        }
    }

    #[test]
    fn extend_from_zero_matches_definition() {
        let (_, mut tpm) = ca_and_tpm(2);
        let m = hash(b"measure-me");
        let v = tpm.extend(PCR_DRTM, "t", &m).unwrap();
        // oracle: sha1(0^20 || sha1("measure-me"))
        assert_eq!(v.to_hex(), "3674330d75ca0ea08af64e16d81437d523db05e7");
        let mut concat = Vec::new();
        concat.extend_from_slice(&[0u8; DIGEST_LEN]);
        concat.extend_from_slice(m.as_bytes());
        assert_eq!(v, hash(&concat));
    }

    #[test]
    fn extend_order_sensitivity() {
        // both orders frozen from the independent oracle
        let m1 = hash(b"m1-fixture");
        let m2 = hash(b"m2-fixture");
        let (_, mut a) = ca_and_tpm(3);
        a.extend(18, "m1", &m1).unwrap();
        let v12 = a.extend(18, "m2", &m2).unwrap();
        assert_eq!(v12.to_hex(), "32c02acd795f9d8ad0bb03a7e1e03ba66568979f");
        let (_, mut b) = ca_and_tpm(4);
        b.extend(18, "m2", &m2).unwrap();
        let v21 = b.extend(18, "m1", &m1).unwrap();
        assert_eq!(v21.to_hex(), "587739beafdc1cc1327817904c1ad9b7c0999372");
        assert_ne!(v12, v21);
        // and the concatenation direction itself matters
        let mut swapped = Vec::new();
        swapped.extend_from_slice(m1.as_bytes());
        swapped.extend_from_slice(&[0u8; DIGEST_LEN]);
        assert_eq!(hash(&swapped).to_hex(), "64ca85af49c040044ac8816ce7b42a3e193a306a");
        assert_ne!(extend_digest(&Digest::ZERO, &m1), hash(&swapped));
    }

    #[test]
    fn trust_chain_from_fixed_digests() {
        // launch-style chain over three abstract module digests, frozen
        // from the independent oracle
        let d_pal = hash(b"pal-digest-fixture");
        let d_fli = hash(b"flicker-digest-fixture");
        let d_pm = hash(b"pm-digest-fixture");
        let chain = extend_digest(
            &extend_digest(&extend_digest(&Digest::ZERO, &d_pal), &d_fli),
            &d_pm,
        );
        assert_eq!(chain.to_hex(), "8918de8d9a34e01f44130ca7f5865e7322757c24");
    }

    #[test]
    fn drtm_launch_resets_measures_and_excludes() {
        let (_, mut tpm) = ca_and_tpm(5);
        tpm.extend(PCR_DRTM, "junk", &hash(b"junk")).unwrap();
        let v = tpm.drtm_launch(b"pal-image-I").unwrap();
        assert_eq!(v.to_hex(), "d7aa151184a67abda32d157a90f1e3488a33b2d8");
        assert_eq!(tpm.sml(PCR_DRTM).unwrap().entries.len(), 1);
        // nested launch refused
        assert_eq!(tpm.drtm_launch(b"x").unwrap_err(), TpmError::DrtmBusy);
        tpm.drtm_close().unwrap();
        // relaunch reproduces the same value; different image differs
        let v2 = tpm.drtm_launch(b"pal-image-I").unwrap();
        assert_eq!(v, v2);
        tpm.drtm_close().unwrap();
        let v3 = tpm.drtm_launch(b"pal-image-J").unwrap();
        assert_eq!(v3.to_hex(), "0189bbe7a2a2e2f9d8163204eff22bbc618308b4");
        assert_ne!(v2, v3);
    }

    #[test]
    fn platform_reset_restores_power_on_state_but_keeps_seals() {
        let (_, mut tpm) = ca_and_tpm(31);
        tpm.extend(15, "boot:key", &hash(b"some key")).unwrap();
        let sealed_at_15 = tpm.seal(b"bound to pcr15", 15).unwrap();
        tpm.drtm_launch(b"pal-image").unwrap();
        let sealed_at_18 = tpm.seal(b"bound to launch", PCR_DRTM).unwrap();

        tpm.platform_reset();
        assert!(!tpm.drtm_is_open());
        assert!(tpm.drtm_events().is_empty());
        for index in 0..PCR_COUNT as u8 {
            assert_eq!(tpm.pcr(index).unwrap(), Digest::ZERO);
            assert!(tpm.sml(index).unwrap().entries.is_empty());
        }

        // register values are gone, so unsealing needs the chain rebuilt
        assert!(tpm.unseal(&sealed_at_15).is_err());
        tpm.extend(15, "boot:key", &hash(b"some key")).unwrap();
        assert_eq!(tpm.unseal(&sealed_at_15).unwrap(), b"bound to pcr15");
        tpm.drtm_launch(b"pal-image").unwrap();
        assert_eq!(tpm.unseal(&sealed_at_18).unwrap(), b"bound to launch");
        tpm.drtm_close().unwrap();
    }

    #[test]
    fn seal_unseal_round_trip_and_violation() {
        let (_, mut tpm) = ca_and_tpm(6);
        tpm.extend(18, "setup", &hash(b"setup")).unwrap();
        let blob = tpm.seal(b"the plaintext", 18).unwrap();
        assert_eq!(tpm.unseal(&blob).unwrap(), b"the plaintext");
        // extending the register afterwards breaks the binding
        tpm.extend(18, "later", &hash(b"anything")).unwrap();
        assert!(matches!(
            tpm.unseal(&blob).unwrap_err(),
            TpmError::SealViolation { index: 18, .. }
        ));
    }

    #[test]
    fn foreign_blob_is_unknown() {
        let (ca, mut a) = ca_and_tpm(7);
        let mut b = TpmEmulator::new(&ca, ChaCha20Rng::seed_from_u64(99));
        let blob = a.seal(b"secret", 18).unwrap();
        assert_eq!(b.unseal(&blob).unwrap_err(), TpmError::UnknownBlob);
        let _ = &mut b;
    }

    #[test]
    fn tampered_blob_fails_integrity() {
        let (_, mut tpm) = ca_and_tpm(8);
        let blob = tpm.seal(b"secret", 18).unwrap();
        // flip one ciphertext byte past the emulator-id prefix
        let mut bad = blob.clone();
        let n = bad.ciphertext.len();
        bad.ciphertext[n - 1] ^= 1;
        assert_eq!(tpm.unseal(&bad).unwrap_err(), TpmError::BlobIntegrity);
        // lying about the sealed register value is also integrity failure
        let mut lied = blob.clone();
        tpm.extend(18, "move", &hash(b"move")).unwrap();
        lied.pcr_value_at_seal = tpm.pcr(18).unwrap();
        assert_eq!(tpm.unseal(&lied).unwrap_err(), TpmError::BlobIntegrity);
    }

    #[test]
    fn quote_verifies_and_rejections_are_structured() {
        let (ca, mut tpm) = ca_and_tpm(9);
        tpm.drtm_launch(b"image").unwrap();
        tpm.extend(18, "more", &hash(b"more")).unwrap();
        let nonce = tpm.random_nonce();
        let quote = tpm.quote(18, &nonce).unwrap();
        let log = tpm.sml(18).unwrap();
        verify_quote(&quote, &nonce, &log, &ca.public).unwrap();

        // flipped log digest
        let mut bad_log = log.clone();
        bad_log.entries[0].1 .0[0] ^= 1;
        assert!(matches!(
            verify_quote(&quote, &nonce, &bad_log, &ca.public),
            Err(QuoteRejection::LogMismatch { .. })
        ));
        // stale nonce
        let other_nonce = tpm.random_nonce();
        assert!(matches!(
            verify_quote(&quote, &other_nonce, &log, &ca.public),
            Err(QuoteRejection::StaleNonce { .. })
        ));
        // wrong CA
        let mut other_rng = ChaCha20Rng::seed_from_u64(1000);
        let other_ca = crypto::generate_keypair(KeyPurpose::Ek, &mut other_rng);
        assert_eq!(
            verify_quote(&quote, &nonce, &log, &other_ca.public),
            Err(QuoteRejection::BadCertificate)
        );
        // mutated signature
        let mut bad_sig = quote.clone();
        bad_sig.signature[10] ^= 1;
        assert_eq!(
            verify_quote(&bad_sig, &nonce, &log, &ca.public),
            Err(QuoteRejection::BadSignature)
        );
    }

    #[test]
    fn snapshot_round_trip_preserves_behavior() {
        let (_, mut tpm) = ca_and_tpm(10);
        tpm.extend(15, "key", &hash(b"key")).unwrap();
        let blob = tpm.seal(b"snapshot me", 15).unwrap();
        let snap = tpm.snapshot();
        let restored = TpmEmulator::restore(&snap).unwrap();
        assert_eq!(restored.pcr(15).unwrap(), tpm.pcr(15).unwrap());
        assert_eq!(restored.unseal(&blob).unwrap(), b"snapshot me");
        // generator state carried over: both produce the same next nonce
        let mut a = tpm;
        let mut b = restored;
        assert_eq!(a.random_nonce(), b.random_nonce());
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let (_, tpm) = ca_and_tpm(11);
        let snap = tpm.snapshot();
        assert!(TpmEmulator::restore(&snap[..snap.len() - 1]).is_err());
        let mut bad = snap.clone();
        bad[0] ^= 1;
        let err = match TpmEmulator::restore(&bad) {
            Err(e) => e,
            Ok(_) => panic!("corrupted snapshot restored"),
        };
        assert!(matches!(err, TpmError::Snapshot("bad magic")));
    }

    #[test]
    fn quote_encode_decode_round_trip() {
        let (_, mut tpm) = ca_and_tpm(12);
        let nonce = tpm.random_nonce();
        let quote = tpm.quote(18, &nonce).unwrap();
        assert_eq!(Quote::decode(&quote.encode()).unwrap(), quote);
    }

    #[test]
    fn sealed_blob_encode_decode_round_trip() {
        let (_, mut tpm) = ca_and_tpm(13);
        let blob = tpm.seal(b"x", 18).unwrap();
        assert_eq!(SealedBlob::decode(&blob.encode()).unwrap(), blob);
    }
}
