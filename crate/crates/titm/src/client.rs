//! The user-side agent.
//!
//! The client holds the only long-lived user secrets in the system — the
//! master password and the one-time-password secret phrase live in the
//! user's head; what the client *stores* is a profile of public material:
//! the authority key, the digests of the kernel stack it is willing to
//! talk to, and the one-time-password parameters with a cursor.
//!
//! Before sending anything sensitive the client demands attestation: a
//! quote over the launch register whose log must replay to the quoted
//! value *and* read exactly boot-to-binding — kernel image, invocation
//! layer, host image, then the binding of the offered tunnel key to the
//! offered nonce. Only a key that a genuine kernel launch generated and
//! logged can pass, so encrypting to it denies the host plaintext access.
//! Payloads are encrypted to that pinned key and nothing else.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{self, hash, CryptoError, Digest, Nonce, PublicKey};
use crate::messages::{Channel, ChannelError, Frame};
use crate::otp::{self, OtpError, OtpParams};
use crate::pal::{LOG_LABEL_BIND, LOG_LABEL_FLICKER, LOG_LABEL_PROXY};
use crate::tpm::{verify_quote, MeasurementLog, Quote, LOG_LABEL_DRTM};
use crate::wire::{self, Reader, WireError, Writer};

const PROFILE_MAGIC: &[u8; 4] = b"TIMP";
const PROFILE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Channel(#[from] ChannelError),
    #[error("peer replied out of protocol: expected {expected}, got {got}")]
    UnexpectedFrame { expected: &'static str, got: String },
    #[error("peer refused: {code}: {detail}")]
    Refused { code: String, detail: String },
    #[error("attestation failed: {0}")]
    QuoteRejected(#[from] crate::tpm::QuoteRejection),
    #[error("attestation failed: {0}")]
    Attestation(String),
    #[error("no attested tunnel is pinned")]
    NoTunnel,
    #[error("no registration on file")]
    NotRegistered,
    #[error("one-time-password list is exhausted")]
    OtpExhausted,
    #[error("profile file malformed")]
    Profile,
    #[error("cannot access {path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Otp(#[from] OtpError),
}

impl From<WireError> for ClientError {
    fn from(_: WireError) -> ClientError {
        ClientError::Profile
    }
}

/// Digests of the modules the client will accept in an attested log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrustedImages {
    pub pal: Digest,
    pub flicker: Digest,
    pub proxy: Digest,
}

/// Everything the client persists between runs. No secrets: the master
/// password and secret phrase are supplied per call and never stored.
#[derive(Clone, Debug)]
pub struct ClientProfile {
    pub user_id: String,
    pub proxy_address: String,
    pub ca_pub: PublicKey,
    pub trusted: TrustedImages,
    pub otp_params: Option<String>,
    /// One-time passwords consumed so far; the next login uses element
    /// `otp_cursor + 1`. Never decreases — reusing an element would be
    /// offering the verifier a password it has already burned.
    pub otp_cursor: u32,
}

impl ClientProfile {
    pub fn new(
        user_id: impl Into<String>,
        proxy_address: impl Into<String>,
        ca_pub: PublicKey,
        trusted: TrustedImages,
    ) -> ClientProfile {
        ClientProfile {
            user_id: user_id.into(),
            proxy_address: proxy_address.into(),
            ca_pub,
            trusted,
            otp_params: None,
            otp_cursor: 0,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(PROFILE_MAGIC)
            .u8(PROFILE_VERSION)
            .str(&self.user_id)
            .str(&self.proxy_address)
            .bytes(&self.ca_pub.canonical_bytes())
            .raw(self.trusted.pal.as_bytes())
            .raw(self.trusted.flicker.as_bytes())
            .raw(self.trusted.proxy.as_bytes())
            .str(self.otp_params.as_deref().unwrap_or(""))
            .u32(self.otp_cursor);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<ClientProfile, ClientError> {
        let mut r = Reader::new(bytes);
        if r.raw(4)? != PROFILE_MAGIC || r.u8()? != PROFILE_VERSION {
            return Err(ClientError::Profile);
        }
        let user_id = r.str()?;
        let proxy_address = r.str()?;
        let ca_pub = PublicKey::from_canonical(&r.bytes()?)?;
        let mut digest = || -> Result<Digest, ClientError> {
            Ok(Digest::from_slice(r.raw(crypto::DIGEST_LEN)?)?)
        };
        let pal = digest()?;
        let flicker = digest()?;
        let proxy = digest()?;
        let params = r.str()?;
        let otp_cursor = r.u32()?;
        r.finish()?;
        Ok(ClientProfile {
            user_id,
            proxy_address,
            ca_pub,
            trusted: TrustedImages { pal, flicker, proxy },
            otp_params: (!params.is_empty()).then_some(params),
            otp_cursor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        fs::write(path, self.encode()).map_err(|e| ClientError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<ClientProfile, ClientError> {
        let bytes = fs::read(path).map_err(|e| ClientError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        ClientProfile::decode(&bytes)
    }
}

/// An attested tunnel key the client is willing to encrypt to.
#[derive(Clone, Debug)]
pub struct PinnedTunnel {
    pub tunnel_id: u64,
    pub pal_pub: PublicKey,
    pub nonce: Nonce,
}

pub struct Client {
    pub profile: ClientProfile,
    rng: ChaCha20Rng,
    tunnel: Option<PinnedTunnel>,
}

fn expect_err(expected: &'static str, got: Frame) -> ClientError {
    match got {
        Frame::Error { code, detail } => ClientError::Refused { code, detail },
        other => ClientError::UnexpectedFrame { expected, got: other.kind().to_string() },
    }
}

impl Client {
    pub fn new(profile: ClientProfile, rng: ChaCha20Rng) -> Client {
        Client { profile, rng, tunnel: None }
    }

    pub fn pinned(&self) -> Option<&PinnedTunnel> {
        self.tunnel.as_ref()
    }

    /// Request a tunnel and attest it. On success the offered key is
    /// pinned for exactly one registration or login.
    pub fn establish_tunnel(&mut self, ch: &mut dyn Channel) -> Result<(), ClientError> {
        self.tunnel = None;
        let (tunnel_id, pal_pub_bytes, nonce) = match ch.request(Frame::TunnelRequest)? {
            Frame::TunnelOffer { tunnel_id, pal_pub, nonce } => (tunnel_id, pal_pub, nonce),
            other => return Err(expect_err("tunnel-offer", other)),
        };

        let client_nonce = Nonce::generate(&mut self.rng);
        let reply = ch.request(Frame::AttestChallenge { tunnel_id, client_nonce })?;
        let (quote, sml) = match reply {
            Frame::AttestResponse { tunnel_id: id, quote, sml } if id == tunnel_id => {
                (quote, sml)
            }
            other => return Err(expect_err("attest-response", other)),
        };
        let quote = Quote::decode(&quote)
            .map_err(|_| ClientError::Attestation("quote is malformed".to_string()))?;
        let sml = MeasurementLog::decode(&sml)
            .map_err(|_| ClientError::Attestation("measurement log is malformed".to_string()))?;
        verify_quote(&quote, &client_nonce, &sml, &self.profile.ca_pub)?;

        // The quoted log must read exactly boot-to-binding: any missing,
        // extra, or substituted entry means the key was not minted by the
        // stack this profile trusts.
        let mut binding = pal_pub_bytes.clone();
        binding.extend_from_slice(nonce.as_bytes());
        let expected = [
            (LOG_LABEL_DRTM, self.profile.trusted.pal),
            (LOG_LABEL_FLICKER, self.profile.trusted.flicker),
            (LOG_LABEL_PROXY, self.profile.trusted.proxy),
            (LOG_LABEL_BIND, hash(&binding)),
        ];
        let matches = sml.entries.len() == expected.len()
            && sml
                .entries
                .iter()
                .zip(expected.iter())
                .all(|((label, m), (want_label, want_m))| label == want_label && m == want_m);
        if !matches {
            return Err(ClientError::Attestation(
                "attested log does not chain the trusted stack to this key".to_string(),
            ));
        }

        let pal_pub = PublicKey::from_canonical(&pal_pub_bytes)
            .map_err(|_| ClientError::Attestation("offered key is malformed".to_string()))?;
        self.tunnel = Some(PinnedTunnel { tunnel_id, pal_pub, nonce });
        Ok(())
    }

    /// Encrypt a field map to the pinned tunnel key. Refuses to encrypt
    /// anything when no attested key is pinned.
    pub fn encrypt_to_tunnel(&mut self, pairs: &[(&str, &str)]) -> Result<Vec<u8>, ClientError> {
        let tunnel = self.tunnel.as_ref().ok_or(ClientError::NoTunnel)?;
        let map = wire::field_map(pairs.iter().map(|(k, v)| (*k, v.as_bytes().to_vec())));
        Ok(crypto::encrypt(&tunnel.pal_pub, &wire::encode_field_map(&map), &mut self.rng))
    }

    /// Register this profile's user. Consumes the pinned tunnel. Returns
    /// and records the one-time-password parameters.
    pub fn register(
        &mut self,
        ch: &mut dyn Channel,
        master_password: &str,
        secret_phrase: &str,
    ) -> Result<String, ClientError> {
        let user_id = self.profile.user_id.clone();
        let enc_payload = self.encrypt_to_tunnel(&[
            ("master_password", master_password),
            ("secret_phrase", secret_phrase),
            ("user_id", &user_id),
        ])?;
        let tunnel = self.tunnel.take().expect("checked by encrypt_to_tunnel");
        let reply = ch.request(Frame::RegisterRequest {
            tunnel_id: tunnel.tunnel_id,
            user_id,
            enc_payload,
        })?;
        match reply {
            Frame::RegisterResponse { otp_params } => {
                OtpParams::from_line(&otp_params)?;
                self.profile.otp_params = Some(otp_params.clone());
                self.profile.otp_cursor = 0;
                Ok(otp_params)
            }
            other => Err(expect_err("register-response", other)),
        }
    }

    /// Log in with the master password. Consumes the pinned tunnel.
    pub fn login_master(
        &mut self,
        ch: &mut dyn Channel,
        master_password: &str,
    ) -> Result<u64, ClientError> {
        self.login(ch, "master", master_password)
    }

    /// Log in with the next one-time password derived from the secret
    /// phrase. Consumes the pinned tunnel and, on success, one password.
    pub fn login_otp(
        &mut self,
        ch: &mut dyn Channel,
        secret_phrase: &str,
    ) -> Result<u64, ClientError> {
        let params_line = self.profile.otp_params.clone().ok_or(ClientError::NotRegistered)?;
        let params = OtpParams::from_line(&params_line)?;
        if self.profile.otp_cursor >= params.count {
            return Err(ClientError::OtpExhausted);
        }
        let chain = otp::derive_chain(secret_phrase, &params)?;
        let element = chain[self.profile.otp_cursor as usize];
        let session = self.login(ch, "otp", &element.to_hex())?;
        self.profile.otp_cursor += 1;
        Ok(session)
    }

    /// Log in with an explicit password kind and value, for callers that
    /// obtained the password outside this client (e.g. a printed one-time
    /// password typed on another machine).
    pub fn login_with(
        &mut self,
        ch: &mut dyn Channel,
        kind: &str,
        password: &str,
    ) -> Result<u64, ClientError> {
        self.login(ch, kind, password)
    }

    fn login(
        &mut self,
        ch: &mut dyn Channel,
        kind: &str,
        password: &str,
    ) -> Result<u64, ClientError> {
        let user_id = self.profile.user_id.clone();
        let enc_payload = self.encrypt_to_tunnel(&[
            ("kind", kind),
            ("password", password),
            ("user_id", &user_id),
        ])?;
        let tunnel = self.tunnel.take().expect("checked by encrypt_to_tunnel");
        let reply = ch.request(Frame::LoginRequest {
            tunnel_id: tunnel.tunnel_id,
            user_id,
            enc_payload,
        })?;
        match reply {
            Frame::LoginResponse { session_id } => {
                // the login tunnel key stays pinned: add-on payloads in
                // this session are encrypted to it
                self.tunnel = Some(tunnel);
                Ok(session_id)
            }
            other => Err(expect_err("login-response", other)),
        }
    }

    /// Fetch a page through the proxy.
    pub fn visit(
        &mut self,
        ch: &mut dyn Channel,
        session_id: u64,
        site_id: &str,
        kind: &str,
    ) -> Result<(u64, Vec<(String, String)>), ClientError> {
        let reply = ch.request(Frame::VisitRequest {
            session_id,
            site_id: site_id.to_string(),
            kind: kind.to_string(),
        })?;
        match reply {
            Frame::PageResponse { page_token, fields, .. } => Ok((page_token, fields)),
            other => Err(expect_err("page-response", other)),
        }
    }

    /// Enroll credentials for the visited page: the values are encrypted
    /// to the session's tunnel key before they leave the client.
    pub fn enroll(
        &mut self,
        ch: &mut dyn Channel,
        session_id: u64,
        page_token: u64,
        credentials: &[(&str, &str)],
    ) -> Result<(bool, String), ClientError> {
        let enc_cred = self.encrypt_to_tunnel(credentials)?;
        let reply = ch.request(Frame::EnrollRequest { session_id, page_token, enc_cred })?;
        match reply {
            Frame::TargetResult { ok, detail } => Ok((ok, detail)),
            other => Err(expect_err("target-result", other)),
        }
    }

    /// Ask the proxy to submit the enrolled credentials for this page.
    pub fn submit(
        &mut self,
        ch: &mut dyn Channel,
        session_id: u64,
        page_token: u64,
    ) -> Result<(bool, String), ClientError> {
        let reply = ch.request(Frame::SubmitRequest { session_id, page_token })?;
        match reply {
            Frame::TargetResult { ok, detail } => Ok((ok, detail)),
            other => Err(expect_err("target-result", other)),
        }
    }

    /// Drive a credential update: new values encrypted to the session
    /// tunnel, old values supplied by the proxy's stored record.
    pub fn update(
        &mut self,
        ch: &mut dyn Channel,
        session_id: u64,
        page_token: u64,
        new_values: &[(&str, &str)],
    ) -> Result<(bool, String), ClientError> {
        let enc_new_cred = self.encrypt_to_tunnel(new_values)?;
        let reply =
            ch.request(Frame::UpdateRequest { session_id, page_token, enc_new_cred })?;
        match reply {
            Frame::TargetResult { ok, detail } => Ok((ok, detail)),
            other => Err(expect_err("target-result", other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, KeyPurpose};
    use rand_core::SeedableRng;

    fn sample_profile() -> ClientProfile {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ca = generate_keypair(KeyPurpose::Ek, &mut rng);
        ClientProfile {
            user_id: "alice".into(),
            proxy_address: "proxy.sim:1".into(),
            ca_pub: ca.public,
            trusted: TrustedImages {
                pal: hash(b"pal"),
                flicker: hash(b"flicker"),
                proxy: hash(b"proxy"),
            },
            otp_params: Some("otp/v1;seed=abc123;n=100".into()),
            otp_cursor: 17,
        }
    }

    #[test]
    fn profile_round_trips_through_disk_format() {
        let profile = sample_profile();
        let decoded = ClientProfile::decode(&profile.encode()).unwrap();
        assert_eq!(decoded.user_id, profile.user_id);
        assert_eq!(decoded.proxy_address, profile.proxy_address);
        assert_eq!(decoded.ca_pub, profile.ca_pub);
        assert_eq!(decoded.trusted, profile.trusted);
        assert_eq!(decoded.otp_params, profile.otp_params);
        assert_eq!(decoded.otp_cursor, profile.otp_cursor);
    }

    #[test]
    fn profile_without_registration_round_trips() {
        let mut profile = sample_profile();
        profile.otp_params = None;
        profile.otp_cursor = 0;
        let decoded = ClientProfile::decode(&profile.encode()).unwrap();
        assert_eq!(decoded.otp_params, None);
    }

    #[test]
    fn profile_rejects_wrong_magic() {
        let mut bytes = sample_profile().encode();
        bytes[0] ^= 0xFF;
        assert!(ClientProfile::decode(&bytes).is_err());
    }

    #[test]
    fn encryption_requires_a_pinned_tunnel() {
        let mut client = Client::new(sample_profile(), ChaCha20Rng::seed_from_u64(8));
        match client.encrypt_to_tunnel(&[("password", "hunter2")]) {
            Err(ClientError::NoTunnel) => {}
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn exhausted_otp_list_is_refused_client_side() {
        let mut profile = sample_profile();
        profile.otp_params = Some("otp/v1;seed=abc123;n=3".into());
        profile.otp_cursor = 3;
        let mut client = Client::new(profile, ChaCha20Rng::seed_from_u64(9));
        struct NoChannel;
        impl Channel for NoChannel {
            fn request(&mut self, _: Frame) -> Result<Frame, ChannelError> {
                panic!("must not reach the network");
            }
        }
        match client.login_otp(&mut NoChannel, "the phrase") {
            Err(ClientError::OtpExhausted) => {}
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }
}
