//! The security kernel: the only code that ever touches plaintext secrets.
//!
//! [`run_pal`] models the measured code module that a dynamic launch drops
//! into an isolated execution environment. It runs in four phases:
//!
//! 1. **Measurement** — unconditionally extend the launch register with the
//!    invocation-layer digest and then the host-module digest, completing
//!    the boot-to-kernel trust chain begun by the launch itself.
//! 2. **Input** — decode the request envelope and enforce its closed
//!    per-option field schema.
//! 3. **Execution** — dispatch to exactly one operation block.
//! 4. **Output** — encode the result (or a structured error) as the reply
//!    envelope. Secrets never appear in reply envelopes: every sensitive
//!    output is sealed, encrypted to a verified key, or reduced to a digest.
//!
//! The operation blocks are plain functions over the emulator handle plus
//! plaintext arguments, so each is unit-testable without envelope plumbing.

pub mod envelope;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{
    self, ct_digest_eq, hash, scrub, Digest, KeyPurpose, Nonce, PrivateKey, PublicKey,
    DIGEST_LEN,
};
use crate::otp::{self, OtpChain, OtpError, OtpParams};
use crate::tpm::{extend_digest, SealedBlob, TpmEmulator, TpmError, PCR_DRTM, PCR_PROXY_KEY};
use crate::wire::{self, Reader, WireError, Writer};

pub use envelope::{EnvelopeError, PalEnvelope, PalOption};

/// Digests of the two modules the kernel measures during phase 1 (its own
/// image was already measured by the dynamic launch).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PalContext {
    pub flicker_digest: Digest,
    pub proxy_digest: Digest,
}

/// Log labels for phase-1 measurements; verifiers match on these.
pub const LOG_LABEL_FLICKER: &str = "flicker";
pub const LOG_LABEL_PROXY: &str = "proxy";
/// Log label for the tunnel-key binding extend.
pub const LOG_LABEL_BIND: &str = "pal:bind";
/// Log label for the authentication verdict extend.
pub const LOG_LABEL_VERDICT: &str = "pal:verdict";

/// The expected launch-register value once phase 1 completes: the launch
/// measured the kernel image, then phase 1 chained the invocation layer and
/// the host module.
pub fn expected_chain(pal: &Digest, flicker: &Digest, proxy: &Digest) -> Digest {
    let mut v = extend_digest(&Digest::ZERO, pal);
    v = extend_digest(&v, flicker);
    extend_digest(&v, proxy)
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PalError {
    #[error("envelope rejected: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("sealed blob integrity failure")]
    BlobIntegrity,
    #[error("seal bound to a different register state")]
    SealViolation,
    #[error("sealed blob from a foreign platform")]
    UnknownBlob,
    #[error("nonce mismatch: possible replay")]
    Replay,
    #[error("register 15 does not match the claimed key provenance")]
    KeyProvenance,
    #[error("cryptographic operation failed")]
    CryptoFailure,
    #[error("payload malformed: {0}")]
    BadPayload(String),
    #[error("internal state violation: {0}")]
    Internal(&'static str),
}

impl PalError {
    /// Stable one-byte code carried in error envelopes.
    pub fn code(&self) -> u8 {
        match self {
            PalError::Envelope(_) => 1,
            PalError::BlobIntegrity => 2,
            PalError::SealViolation => 3,
            PalError::UnknownBlob => 4,
            PalError::Replay => 5,
            PalError::KeyProvenance => 6,
            PalError::CryptoFailure => 7,
            PalError::BadPayload(_) => 8,
            PalError::Internal(_) => 9,
        }
    }

    pub fn code_name(code: u8) -> &'static str {
        match code {
            1 => "bad-envelope",
            2 => "blob-integrity",
            3 => "seal-violation",
            4 => "unknown-blob",
            5 => "replay",
            6 => "key-provenance",
            7 => "crypto-failure",
            8 => "bad-payload",
            9 => "internal",
            _ => "unknown",
        }
    }
}

impl From<TpmError> for PalError {
    fn from(e: TpmError) -> PalError {
        match e {
            TpmError::SealViolation { .. } => PalError::SealViolation,
            TpmError::UnknownBlob => PalError::UnknownBlob,
            TpmError::BlobIntegrity => PalError::BlobIntegrity,
            _ => PalError::Internal("unexpected emulator error"),
        }
    }
}

impl From<crypto::CryptoError> for PalError {
    fn from(_: crypto::CryptoError) -> PalError {
        PalError::CryptoFailure
    }
}

impl From<WireError> for PalError {
    fn from(e: WireError) -> PalError {
        PalError::BadPayload(e.to_string())
    }
}

impl From<OtpError> for PalError {
    fn from(e: OtpError) -> PalError {
        PalError::BadPayload(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// PassList

/// One user's proxy-authentication material. Only the salted hash of the
/// master password and the current one-time-password chain head are kept;
/// neither value can be turned back into a password.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassEntry {
    pub user_id: String,
    pub salt: Digest,
    pub master_hash: Digest,
    pub otp_head: Digest,
    pub otp_remaining: u32,
    pub otp_params: OtpParams,
}

/// The sealed registry of proxy-authentication passwords.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PassList {
    pub entries: Vec<PassEntry>,
}

impl PassList {
    pub fn find(&self, user_id: &str) -> Option<&PassEntry> {
        self.entries.iter().find(|e| e.user_id == user_id)
    }

    /// Insert or replace the entry for `entry.user_id`.
    pub fn upsert(&mut self, entry: PassEntry) {
        match self.entries.iter_mut().find(|e| e.user_id == entry.user_id) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.user_id);
            w.raw(e.salt.as_bytes());
            w.raw(e.master_hash.as_bytes());
            w.raw(e.otp_head.as_bytes());
            w.u32(e.otp_remaining);
            w.str(&e.otp_params.to_line());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<PassList, PalError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let mut list = PassList::default();
        for _ in 0..count {
            let user_id = r.str()?;
            if list.find(&user_id).is_some() {
                return Err(PalError::BadPayload(format!(
                    "duplicate user entry {user_id:?}"
                )));
            }
            let salt = digest_from(&mut r)?;
            let master_hash = digest_from(&mut r)?;
            let otp_head = digest_from(&mut r)?;
            let otp_remaining = r.u32()?;
            let otp_params = OtpParams::from_line(&r.str()?)
                .map_err(|e| PalError::BadPayload(e.to_string()))?;
            list.entries.push(PassEntry {
                user_id,
                salt,
                master_hash,
                otp_head,
                otp_remaining,
                otp_params,
            });
        }
        r.finish()?;
        Ok(list)
    }
}

fn digest_from(r: &mut Reader<'_>) -> Result<Digest, PalError> {
    Ok(Digest::from_slice(r.raw(DIGEST_LEN)?).expect("fixed-width read"))
}

fn nonce_from(bytes: &[u8]) -> Result<Nonce, PalError> {
    Nonce::from_slice(bytes).map_err(|_| PalError::BadPayload("nonce must be 20 bytes".into()))
}

fn salted_hash(salt: &Digest, password: &str) -> Digest {
    let mut buf = Vec::with_capacity(DIGEST_LEN + password.len());
    buf.extend_from_slice(salt.as_bytes());
    buf.extend_from_slice(password.as_bytes());
    hash(&buf)
}

// ---------------------------------------------------------------------------
// Operation blocks

/// Chain length used when registering new users.
pub const REGISTRATION_OTP_CHAIN_LENGTH: u32 = 100;

/// Verdict bytes extended into the launch register after authentication.
pub const VERDICT_ACCEPT: u8 = 0x01;
pub const VERDICT_REJECT: u8 = 0x00;

/// The measurement extended for a verdict: the hash of the one verdict byte.
pub fn verdict_measurement(accepted: bool) -> Digest {
    hash(&[if accepted { VERDICT_ACCEPT } else { VERDICT_REJECT }])
}

/// Seal the host module's public key, but only if register 15 proves the key
/// was recorded by trusted boot: the register must hold exactly one extend
/// of `hash(pm_pub)` over zero. A second extend (or none) breaks the match.
pub fn block_initial_sealing(tpm: &mut TpmEmulator, pm_pub: &[u8]) -> Result<SealedBlob, PalError> {
    PublicKey::from_canonical(pm_pub).map_err(|_| PalError::BadPayload("pm_pub malformed".into()))?;
    let expected = extend_digest(&Digest::ZERO, &hash(pm_pub));
    let live = tpm.pcr(PCR_PROXY_KEY).map_err(PalError::from)?;
    if live != expected {
        return Err(PalError::KeyProvenance);
    }
    Ok(tpm.seal(pm_pub, PCR_DRTM)?)
}

/// Generate the tunnel keypair: seal the private half (with a fresh nonce)
/// to the current launch register, then extend the register with
/// `hash(pal_pub_canonical || nonce)` so a quote over this session proves
/// exactly which key the kernel created.
pub fn block_secure_tunnel(
    tpm: &mut TpmEmulator,
) -> Result<(PublicKey, SealedBlob, Nonce), PalError> {
    let keypair = crypto::generate_keypair(KeyPurpose::Pal, tpm.rng_mut());
    let nonce = tpm.random_nonce();
    let mut secret = Writer::new();
    secret.bytes(&keypair.private.to_bytes()).raw(nonce.as_bytes());
    let mut secret_bytes = secret.finish();
    let sealed = tpm.seal(&secret_bytes, PCR_DRTM)?;
    scrub(&mut secret_bytes);
    let mut binding = keypair.public.canonical_bytes();
    binding.extend_from_slice(nonce.as_bytes());
    tpm.extend(PCR_DRTM, LOG_LABEL_BIND, &hash(&binding))?;
    Ok((keypair.public.clone(), sealed, nonce))
}

fn unseal_tunnel_key(
    tpm: &TpmEmulator,
    sealed_pal_priv: &SealedBlob,
    nonce: &Nonce,
) -> Result<PrivateKey, PalError> {
    let mut plain = tpm.unseal(sealed_pal_priv)?;
    let parsed = (|| -> Result<(PrivateKey, Nonce), PalError> {
        let mut r = Reader::new(&plain);
        let key_bytes = r.bytes()?;
        let key = PrivateKey::from_bytes(&key_bytes)
            .map_err(|_| PalError::BadPayload("sealed key malformed".into()))?;
        let sealed_nonce = nonce_from(r.raw(DIGEST_LEN)?)?;
        r.finish()?;
        Ok((key, sealed_nonce))
    })();
    scrub(&mut plain);
    let (key, sealed_nonce) = parsed?;
    if sealed_nonce != *nonce {
        return Err(PalError::Replay);
    }
    Ok(key)
}

/// Recover plaintext that a client encrypted to the tunnel key. The sealed
/// key only unseals when the launch register matches its sealing state, and
/// the nonce inside the blob must equal the supplied one, tying the blob to
/// one tunnel session. The plaintext stays inside the kernel: callers here
/// are the other blocks (and the envelope path reduces it to a receipt).
pub fn block_data_extraction(
    tpm: &TpmEmulator,
    enc_data: &[u8],
    sealed_pal_priv: &SealedBlob,
    nonce: &Nonce,
) -> Result<Vec<u8>, PalError> {
    let key = unseal_tunnel_key(tpm, sealed_pal_priv, nonce)?;
    Ok(crypto::decrypt(&key, enc_data)?)
}

/// Add (or replace) a user's authentication material. The plaintext inputs
/// arrived through the tunnel; the result is the public chain parameters and
/// the resealed registry.
pub fn block_registration(
    tpm: &mut TpmEmulator,
    sealed_pass_list: Option<&SealedBlob>,
    user_id: &str,
    master_password: &str,
    secret_phrase: &str,
) -> Result<(OtpParams, SealedBlob), PalError> {
    let mut list = match sealed_pass_list {
        Some(blob) => {
            let mut plain = tpm.unseal(blob)?;
            let list = PassList::decode(&plain);
            scrub(&mut plain);
            list?
        }
        None => PassList::default(),
    };
    let mut seed_bytes = [0u8; 8];
    rand_core::RngCore::fill_bytes(tpm.rng_mut(), &mut seed_bytes);
    let params = OtpParams::new(hex::encode(seed_bytes), REGISTRATION_OTP_CHAIN_LENGTH)
        .expect("generated parameters are valid");
    let chain = otp::initial_chain(secret_phrase, &params)?;
    let salt = tpm.random_nonce().into_digest();
    list.upsert(PassEntry {
        user_id: user_id.to_string(),
        salt,
        master_hash: salted_hash(&salt, master_password),
        otp_head: chain.head,
        otp_remaining: chain.remaining,
        otp_params: params.clone(),
    });
    let mut encoded = list.encode();
    let sealed = tpm.seal(&encoded, PCR_DRTM)?;
    scrub(&mut encoded);
    Ok((params, sealed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PasswordKind {
    Master,
    Otp,
}

impl PasswordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PasswordKind::Master => "master",
            PasswordKind::Otp => "otp",
        }
    }

    pub fn parse(s: &str) -> Result<PasswordKind, PalError> {
        match s {
            "master" => Ok(PasswordKind::Master),
            "otp" => Ok(PasswordKind::Otp),
            other => Err(PalError::BadPayload(format!("unknown password kind {other:?}"))),
        }
    }
}

/// Validate a password against the sealed registry and extend the launch
/// register with the verdict measurement, so the quote over this session
/// attests the same verdict that leaves in the reply envelope. An unknown
/// user follows the same comparison path as a wrong password.
pub fn block_authentication(
    tpm: &mut TpmEmulator,
    sealed_pass_list: &SealedBlob,
    user_id: &str,
    password: &str,
    kind: PasswordKind,
) -> Result<(bool, SealedBlob), PalError> {
    let mut plain = tpm.unseal(sealed_pass_list)?;
    let decoded = PassList::decode(&plain);
    scrub(&mut plain);
    let mut list = decoded?;

    // Decoy entry so the unknown-user path performs the same work.
    let decoy = PassEntry {
        user_id: String::new(),
        salt: Digest::ZERO,
        master_hash: Digest::ZERO,
        otp_head: Digest::ZERO,
        otp_remaining: 0,
        otp_params: OtpParams::new("-", 1).expect("static parameters"),
    };
    let (known, entry) = match list.find(user_id) {
        Some(e) => (true, e.clone()),
        None => (false, decoy),
    };

    let accepted = match kind {
        PasswordKind::Master => ct_digest_eq(&salted_hash(&entry.salt, password), &entry.master_hash) && known,
        PasswordKind::Otp => {
            let candidate = Digest::from_hex(password).unwrap_or(Digest::ZERO);
            if entry.otp_remaining == 0 {
                // exhausted (or decoy) chain: burn one comparison, refuse
                let _ = hash(candidate.as_bytes());
                false
            } else {
                let chain = OtpChain {
                    head: entry.otp_head,
                    remaining: entry.otp_remaining,
                };
                match otp::verify_and_advance(chain, &candidate) {
                    Ok((true, advanced)) if known => {
                        let mut updated = entry.clone();
                        updated.otp_head = advanced.head;
                        updated.otp_remaining = advanced.remaining;
                        list.upsert(updated);
                        true
                    }
                    _ => false,
                }
            }
        }
    };

    let mut encoded = list.encode();
    let resealed = tpm.seal(&encoded, PCR_DRTM)?;
    scrub(&mut encoded);
    tpm.extend(PCR_DRTM, LOG_LABEL_VERDICT, &verdict_measurement(accepted))?;
    Ok((accepted, resealed))
}

/// Re-key stored credentials for the host module: decrypt them with the
/// sealed tunnel key, then encrypt `credentials || nonce_prime` to the
/// sealed host public key. Plaintext never leaves the kernel; `nonce_prime`
/// makes the reply single-use.
pub fn block_credential_decryption(
    tpm: &mut TpmEmulator,
    enc_cred_with_pal: &[u8],
    sealed_pal_priv: &SealedBlob,
    nonce: &Nonce,
    sealed_pm_pub: &SealedBlob,
    nonce_prime: &Nonce,
) -> Result<Vec<u8>, PalError> {
    let pm_pub_bytes = tpm.unseal(sealed_pm_pub)?;
    let pm_pub = PublicKey::from_canonical(&pm_pub_bytes)
        .map_err(|_| PalError::BadPayload("sealed host key malformed".into()))?;
    let key = unseal_tunnel_key(tpm, sealed_pal_priv, nonce)?;
    let mut credentials = crypto::decrypt(&key, enc_cred_with_pal)?;
    let mut reply = Writer::new();
    reply.bytes(&credentials).raw(nonce_prime.as_bytes());
    scrub(&mut credentials);
    let mut reply_bytes = reply.finish();
    let out = crypto::encrypt(&pm_pub, &reply_bytes, tpm.rng_mut());
    scrub(&mut reply_bytes);
    Ok(out)
}

// ---------------------------------------------------------------------------
// The four-phase kernel entry point

fn error_envelope(err: &PalError) -> PalEnvelope {
    PalEnvelope::new(PalOption::Error)
        .with_field("code", vec![err.code()])
        .with_field("detail", err.to_string().into_bytes())
}

fn decode_sealed(field: &[u8]) -> Result<SealedBlob, PalError> {
    SealedBlob::decode(field).map_err(|_| PalError::BadPayload("sealed blob malformed".into()))
}

/// Parse a decrypted payload as a field map with exactly `names` fields,
/// each holding UTF-8 text.
fn parse_text_payload(
    plaintext: &[u8],
    names: &[&str],
) -> Result<BTreeMap<String, String>, PalError> {
    let fields = wire::decode_field_map(plaintext)?;
    if fields.len() != names.len() || !names.iter().all(|n| fields.contains_key(*n)) {
        return Err(PalError::BadPayload("unexpected payload fields".into()));
    }
    let mut out = BTreeMap::new();
    for (name, value) in fields {
        let text = String::from_utf8(value)
            .map_err(|_| PalError::BadPayload(format!("field {name:?} is not text")))?;
        out.insert(name, text);
    }
    Ok(out)
}

fn dispatch(tpm: &mut TpmEmulator, env: &PalEnvelope) -> Result<PalEnvelope, PalError> {
    env.check_input_schema()?;
    let field = |name: &str| env.field(name).expect("schema guarantees presence");
    match env.option {
        PalOption::Error => unreachable!("error envelopes fail schema validation"),
        PalOption::InitialSealing => {
            let sealed = block_initial_sealing(tpm, field("pm_pub"))?;
            Ok(PalEnvelope::new(PalOption::InitialSealing)
                .with_field("sealed_pm_pub", sealed.encode()))
        }
        PalOption::SecureTunnel => {
            let (pal_pub, sealed, nonce) = block_secure_tunnel(tpm)?;
            Ok(PalEnvelope::new(PalOption::SecureTunnel)
                .with_field("pal_pub", pal_pub.canonical_bytes())
                .with_field("sealed_pal_priv", sealed.encode())
                .with_field("nonce", nonce.as_bytes().to_vec()))
        }
        PalOption::DataExtraction => {
            let sealed = decode_sealed(field("sealed_pal_priv"))?;
            let nonce = nonce_from(field("nonce"))?;
            let mut plain = block_data_extraction(tpm, field("enc_data"), &sealed, &nonce)?;
            let receipt = hash(&plain);
            scrub(&mut plain);
            Ok(PalEnvelope::new(PalOption::DataExtraction)
                .with_field("receipt", receipt.as_bytes().to_vec()))
        }
        PalOption::Registration => {
            let sealed = decode_sealed(field("sealed_pal_priv"))?;
            let nonce = nonce_from(field("nonce"))?;
            let mut plain = block_data_extraction(tpm, field("enc_payload"), &sealed, &nonce)?;
            let payload = parse_text_payload(&plain, &["master_password", "secret_phrase", "user_id"]);
            scrub(&mut plain);
            let payload = payload?;
            let prior = match env.field("sealed_pass_list") {
                Some(bytes) => Some(decode_sealed(bytes)?),
                None => None,
            };
            let (params, sealed_list) = block_registration(
                tpm,
                prior.as_ref(),
                &payload["user_id"],
                &payload["master_password"],
                &payload["secret_phrase"],
            )?;
            Ok(PalEnvelope::new(PalOption::Registration)
                .with_field("otp_params", params.to_line().into_bytes())
                .with_field("sealed_pass_list", sealed_list.encode()))
        }
        PalOption::Authentication => {
            let sealed = decode_sealed(field("sealed_pal_priv"))?;
            let nonce = nonce_from(field("nonce"))?;
            let mut plain = block_data_extraction(tpm, field("enc_payload"), &sealed, &nonce)?;
            let payload = parse_text_payload(&plain, &["kind", "password", "user_id"]);
            scrub(&mut plain);
            let payload = payload?;
            let kind = PasswordKind::parse(&payload["kind"])?;
            let list = decode_sealed(field("sealed_pass_list"))?;
            let (accepted, resealed) = block_authentication(
                tpm,
                &list,
                &payload["user_id"],
                &payload["password"],
                kind,
            )?;
            // The kernel asserts which identity this verdict covers; the
            // host must never take that from cleartext request fields.
            Ok(PalEnvelope::new(PalOption::Authentication)
                .with_field("verdict", vec![if accepted { VERDICT_ACCEPT } else { VERDICT_REJECT }])
                .with_field("user_id", payload["user_id"].clone().into_bytes())
                .with_field("sealed_pass_list", resealed.encode()))
        }
        PalOption::CredentialDecryption => {
            let sealed_key = decode_sealed(field("sealed_pal_priv"))?;
            let nonce = nonce_from(field("nonce"))?;
            let sealed_pm = decode_sealed(field("sealed_pm_pub"))?;
            let nonce_prime = nonce_from(field("nonce_prime"))?;
            let enc_cred_pm = block_credential_decryption(
                tpm,
                field("enc_cred"),
                &sealed_key,
                &nonce,
                &sealed_pm,
                &nonce_prime,
            )?;
            Ok(PalEnvelope::new(PalOption::CredentialDecryption)
                .with_field("enc_cred_pm", enc_cred_pm))
        }
    }
}

/// Execute one kernel session over an already-open dynamic launch.
pub fn run_pal(tpm: &mut TpmEmulator, ctx: &PalContext, env: &PalEnvelope) -> PalEnvelope {
    // Phase 1: measurements, unconditional even for malformed requests.
    if !tpm.drtm_is_open() {
        return error_envelope(&PalError::Internal("no launch session open"));
    }
    tpm.extend(PCR_DRTM, LOG_LABEL_FLICKER, &ctx.flicker_digest)
        .expect("launch register index is valid");
    tpm.extend(PCR_DRTM, LOG_LABEL_PROXY, &ctx.proxy_digest)
        .expect("launch register index is valid");

    // Phases 2-4: decode happened in the caller for typed envelopes; schema
    // enforcement and dispatch happen here; errors become error envelopes.
    let out = match dispatch(tpm, env) {
        Ok(reply) => reply,
        Err(err) => error_envelope(&err),
    };
    debug_assert!(out.check_output_schema().is_ok());
    out
}

/// Byte-level entry point: decode the input envelope file contents, run the
/// kernel, return the encoded reply. Malformed bytes produce an encoded
/// error envelope (after phase 1, which does not depend on the input).
pub fn run_pal_bytes(tpm: &mut TpmEmulator, ctx: &PalContext, input: &[u8]) -> Vec<u8> {
    match PalEnvelope::decode(input) {
        Ok(env) => run_pal(tpm, ctx, &env).encode(),
        Err(err) => {
            if tpm.drtm_is_open() {
                tpm.extend(PCR_DRTM, LOG_LABEL_FLICKER, &ctx.flicker_digest)
                    .expect("launch register index is valid");
                tpm.extend(PCR_DRTM, LOG_LABEL_PROXY, &ctx.proxy_digest)
                    .expect("launch register index is valid");
            }
            error_envelope(&PalError::Envelope(err)).encode()
        }
    }
}
