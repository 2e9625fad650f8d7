//! The frame catalog: every message that crosses the simulated network.
//!
//! A frame is one tag byte followed by a positional canonical body; the
//! network layer adds length prefixes when frames are logged or stored.
//! Client↔proxy frames carry tags 1–15; proxy↔target frames 16–18. Nothing
//! in any frame is ever secret in plaintext — credentials only travel inside
//! `enc_*` fields.

use thiserror::Error;

use crate::crypto::{Nonce, DIGEST_LEN};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame malformed: {0}")]
    Malformed(#[from] WireError),
    #[error("unknown frame tag {0}")]
    UnknownTag(u8),
}

/// Errors raised by the transport between two endpoints.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("endpoint {0:?} is unreachable")]
    Unreachable(String),
    #[error("channel failure: {0}")]
    Failed(String),
}

/// A request/response transport bound to one remote endpoint.
pub trait Channel {
    fn request(&mut self, frame: Frame) -> Result<Frame, ChannelError>;
}

/// The proxy's side-channel to target sites, keyed by site id.
pub trait TargetDirectory {
    fn request(&self, site_id: &str, frame: Frame) -> Result<Frame, ChannelError>;
}

/// A directory with no reachable sites (used where targets cannot occur).
pub struct NoTargets;

impl TargetDirectory for NoTargets {
    fn request(&self, site_id: &str, _frame: Frame) -> Result<Frame, ChannelError> {
        Err(ChannelError::Unreachable(site_id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Client asks for a fresh tunnel key (secure-tunnel protocol, step 1).
    TunnelRequest,
    /// Proxy returns the kernel-generated key and nonce.
    TunnelOffer {
        tunnel_id: u64,
        pal_pub: Vec<u8>,
        nonce: Nonce,
    },
    /// Client challenges the proxy to prove the key came from the kernel.
    AttestChallenge {
        tunnel_id: u64,
        client_nonce: Nonce,
    },
    /// Proxy's evidence: a quote over the launch register plus the log.
    AttestResponse {
        tunnel_id: u64,
        quote: Vec<u8>,
        sml: Vec<u8>,
    },
    /// Registration payload (master password and secret phrase inside
    /// `enc_payload`, encrypted to the pinned tunnel key).
    RegisterRequest {
        tunnel_id: u64,
        user_id: String,
        enc_payload: Vec<u8>,
    },
    RegisterResponse {
        otp_params: String,
    },
    /// Login payload (password inside `enc_payload`).
    LoginRequest {
        tunnel_id: u64,
        user_id: String,
        enc_payload: Vec<u8>,
    },
    LoginResponse {
        session_id: u64,
    },
    /// Ask the proxy to fetch a page from a site ("login" or "update").
    VisitRequest {
        session_id: u64,
        site_id: String,
        kind: String,
    },
    /// The rendered page: field names with rendered values (dummies or
    /// empty), plus which fields are credentials.
    PageResponse {
        page_token: u64,
        site_id: String,
        kind: String,
        fields: Vec<(String, String)>,
        credential_fields: Vec<String>,
        old_credential_fields: Vec<String>,
    },
    /// First-time credential hand-off for a site (encrypted to the tunnel).
    EnrollRequest {
        session_id: u64,
        page_token: u64,
        enc_cred: Vec<u8>,
    },
    /// Submit a dummy-filled login page; carries no credential material.
    SubmitRequest {
        session_id: u64,
        page_token: u64,
    },
    /// Submit an update page; the new credentials ride encrypted.
    UpdateRequest {
        session_id: u64,
        page_token: u64,
        enc_new_cred: Vec<u8>,
    },
    /// Target verdict, relayed verbatim to the client.
    TargetResult {
        ok: bool,
        detail: String,
    },
    /// Structured refusal; `code` is a stable kebab-case identifier.
    Error {
        code: String,
        detail: String,
    },
    /// Proxy opens a connection to a target site.
    TargetConnect,
    /// Target identifies itself: certificate plus its page schemas.
    TargetWelcome {
        site_id: String,
        cert: Vec<u8>,
        login_schema: Vec<u8>,
        update_schema: Vec<u8>,
    },
    /// Proxy submits a filled form ("login" or "update").
    TargetSubmit {
        kind: String,
        fields: Vec<(String, String)>,
    },
}

fn write_pairs(w: &mut Writer, pairs: &[(String, String)]) {
    w.u32(pairs.len() as u32);
    for (k, v) in pairs {
        w.str(k);
        w.str(v);
    }
}

fn read_pairs(r: &mut Reader<'_>) -> Result<Vec<(String, String)>, WireError> {
    let count = r.u32()?;
    let mut pairs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let k = r.str()?;
        let v = r.str()?;
        pairs.push((k, v));
    }
    Ok(pairs)
}

fn write_names(w: &mut Writer, names: &[String]) {
    w.u32(names.len() as u32);
    for n in names {
        w.str(n);
    }
}

fn read_names(r: &mut Reader<'_>) -> Result<Vec<String>, WireError> {
    let count = r.u32()?;
    let mut names = Vec::with_capacity(count as usize);
    for _ in 0..count {
        names.push(r.str()?);
    }
    Ok(names)
}

impl Frame {
    pub fn tag(&self) -> u8 {
        match self {
            Frame::TunnelRequest => 1,
            Frame::TunnelOffer { .. } => 2,
            Frame::AttestChallenge { .. } => 3,
            Frame::AttestResponse { .. } => 4,
            Frame::RegisterRequest { .. } => 5,
            Frame::RegisterResponse { .. } => 6,
            Frame::LoginRequest { .. } => 7,
            Frame::LoginResponse { .. } => 8,
            Frame::VisitRequest { .. } => 9,
            Frame::PageResponse { .. } => 10,
            Frame::EnrollRequest { .. } => 11,
            Frame::SubmitRequest { .. } => 12,
            Frame::UpdateRequest { .. } => 13,
            Frame::TargetResult { .. } => 14,
            Frame::Error { .. } => 15,
            Frame::TargetConnect => 16,
            Frame::TargetWelcome { .. } => 17,
            Frame::TargetSubmit { .. } => 18,
        }
    }

    /// Stable display name (transcripts, reports, leak findings).
    pub fn kind(&self) -> &'static str {
        match self {
            Frame::TunnelRequest => "tunnel-request",
            Frame::TunnelOffer { .. } => "tunnel-offer",
            Frame::AttestChallenge { .. } => "attest-challenge",
            Frame::AttestResponse { .. } => "attest-response",
            Frame::RegisterRequest { .. } => "register-request",
            Frame::RegisterResponse { .. } => "register-response",
            Frame::LoginRequest { .. } => "login-request",
            Frame::LoginResponse { .. } => "login-response",
            Frame::VisitRequest { .. } => "visit-request",
            Frame::PageResponse { .. } => "page-response",
            Frame::EnrollRequest { .. } => "enroll-request",
            Frame::SubmitRequest { .. } => "submit-request",
            Frame::UpdateRequest { .. } => "update-request",
            Frame::TargetResult { .. } => "target-result",
            Frame::Error { .. } => "error",
            Frame::TargetConnect => "target-connect",
            Frame::TargetWelcome { .. } => "target-welcome",
            Frame::TargetSubmit { .. } => "target-submit",
        }
    }

    /// Frames whose replay must always be refused: they either carry
    /// encrypted credentials/passwords, re-trigger a credential submission,
    /// or carry attestation evidence.
    pub fn is_replay_sensitive(&self) -> bool {
        matches!(
            self,
            Frame::RegisterRequest { .. }
                | Frame::LoginRequest { .. }
                | Frame::EnrollRequest { .. }
                | Frame::SubmitRequest { .. }
                | Frame::UpdateRequest { .. }
                | Frame::AttestResponse { .. }
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        match self {
            Frame::TunnelRequest | Frame::TargetConnect => {}
            Frame::TunnelOffer {
                tunnel_id,
                pal_pub,
                nonce,
            } => {
                w.u64(*tunnel_id).bytes(pal_pub).raw(nonce.as_bytes());
            }
            Frame::AttestChallenge {
                tunnel_id,
                client_nonce,
            } => {
                w.u64(*tunnel_id).raw(client_nonce.as_bytes());
            }
            Frame::AttestResponse {
                tunnel_id,
                quote,
                sml,
            } => {
                w.u64(*tunnel_id).bytes(quote).bytes(sml);
            }
            Frame::RegisterRequest {
                tunnel_id,
                user_id,
                enc_payload,
            }
            | Frame::LoginRequest {
                tunnel_id,
                user_id,
                enc_payload,
            } => {
                w.u64(*tunnel_id).str(user_id).bytes(enc_payload);
            }
            Frame::RegisterResponse { otp_params } => {
                w.str(otp_params);
            }
            Frame::LoginResponse { session_id } => {
                w.u64(*session_id);
            }
            Frame::VisitRequest {
                session_id,
                site_id,
                kind,
            } => {
                w.u64(*session_id).str(site_id).str(kind);
            }
            Frame::PageResponse {
                page_token,
                site_id,
                kind,
                fields,
                credential_fields,
                old_credential_fields,
            } => {
                w.u64(*page_token).str(site_id).str(kind);
                write_pairs(&mut w, fields);
                write_names(&mut w, credential_fields);
                write_names(&mut w, old_credential_fields);
            }
            Frame::EnrollRequest {
                session_id,
                page_token,
                enc_cred,
            } => {
                w.u64(*session_id).u64(*page_token).bytes(enc_cred);
            }
            Frame::SubmitRequest {
                session_id,
                page_token,
            } => {
                w.u64(*session_id).u64(*page_token);
            }
            Frame::UpdateRequest {
                session_id,
                page_token,
                enc_new_cred,
            } => {
                w.u64(*session_id).u64(*page_token).bytes(enc_new_cred);
            }
            Frame::TargetResult { ok, detail } => {
                w.u8(u8::from(*ok)).str(detail);
            }
            Frame::Error { code, detail } => {
                w.str(code).str(detail);
            }
            Frame::TargetWelcome {
                site_id,
                cert,
                login_schema,
                update_schema,
            } => {
                w.str(site_id).bytes(cert).bytes(login_schema).bytes(update_schema);
            }
            Frame::TargetSubmit { kind, fields } => {
                w.str(kind);
                write_pairs(&mut w, fields);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let frame = match tag {
            1 => Frame::TunnelRequest,
            2 => Frame::TunnelOffer {
                tunnel_id: r.u64()?,
                pal_pub: r.bytes()?,
                nonce: read_nonce(&mut r)?,
            },
            3 => Frame::AttestChallenge {
                tunnel_id: r.u64()?,
                client_nonce: read_nonce(&mut r)?,
            },
            4 => Frame::AttestResponse {
                tunnel_id: r.u64()?,
                quote: r.bytes()?,
                sml: r.bytes()?,
            },
            5 => Frame::RegisterRequest {
                tunnel_id: r.u64()?,
                user_id: r.str()?,
                enc_payload: r.bytes()?,
            },
            6 => Frame::RegisterResponse { otp_params: r.str()? },
            7 => Frame::LoginRequest {
                tunnel_id: r.u64()?,
                user_id: r.str()?,
                enc_payload: r.bytes()?,
            },
            8 => Frame::LoginResponse { session_id: r.u64()? },
            9 => Frame::VisitRequest {
                session_id: r.u64()?,
                site_id: r.str()?,
                kind: r.str()?,
            },
            10 => Frame::PageResponse {
                page_token: r.u64()?,
                site_id: r.str()?,
                kind: r.str()?,
                fields: read_pairs(&mut r)?,
                credential_fields: read_names(&mut r)?,
                old_credential_fields: read_names(&mut r)?,
            },
            11 => Frame::EnrollRequest {
                session_id: r.u64()?,
                page_token: r.u64()?,
                enc_cred: r.bytes()?,
            },
            12 => Frame::SubmitRequest {
                session_id: r.u64()?,
                page_token: r.u64()?,
            },
            13 => Frame::UpdateRequest {
                session_id: r.u64()?,
                page_token: r.u64()?,
                enc_new_cred: r.bytes()?,
            },
            14 => Frame::TargetResult {
                ok: r.u8()? == 1,
                detail: r.str()?,
            },
            15 => Frame::Error {
                code: r.str()?,
                detail: r.str()?,
            },
            16 => Frame::TargetConnect,
            17 => Frame::TargetWelcome {
                site_id: r.str()?,
                cert: r.bytes()?,
                login_schema: r.bytes()?,
                update_schema: r.bytes()?,
            },
            18 => Frame::TargetSubmit {
                kind: r.str()?,
                fields: read_pairs(&mut r)?,
            },
            other => return Err(FrameError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(frame)
    }

    /// Convenience constructor for refusals.
    pub fn error(code: &str, detail: impl Into<String>) -> Frame {
        Frame::Error {
            code: code.to_string(),
            detail: detail.into(),
        }
    }
}

fn read_nonce(r: &mut Reader<'_>) -> Result<Nonce, FrameError> {
    let bytes = r.raw(DIGEST_LEN)?;
    Ok(Nonce::from_slice(bytes).expect("fixed-width read"))
}

/// Refusal codes the proxy and client emit. Stable strings: scenario
/// classification and operators key on them.
pub mod codes {
    pub const BAD_REQUEST: &str = "bad-request";
    pub const BUSY: &str = "busy";
    pub const REPLAY: &str = "replay";
    pub const AUTH_REFUSED: &str = "auth-refused";
    pub const NOT_AUTHENTICATED: &str = "not-authenticated";
    pub const CERTIFICATE_REFUSED: &str = "certificate-refused";
    pub const ATTESTATION: &str = "attestation";
    pub const SEAL_VIOLATION: &str = "seal-violation";
    pub const BLOB_INTEGRITY: &str = "blob-integrity";
    pub const UNKNOWN_BLOB: &str = "unknown-blob";
    pub const KEY_PROVENANCE: &str = "key-provenance";
    pub const KERNEL: &str = "kernel";
    pub const UNKNOWN_SITE: &str = "unknown-site";
    pub const STORAGE: &str = "storage";
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<Frame> {
        vec![
            Frame::TunnelRequest,
            Frame::TunnelOffer {
                tunnel_id: 7,
                pal_pub: vec![1, 2, 3],
                nonce: Nonce([9; 20]),
            },
            Frame::AttestChallenge {
                tunnel_id: 7,
                client_nonce: Nonce([8; 20]),
            },
            Frame::AttestResponse {
                tunnel_id: 7,
                quote: vec![4; 40],
                sml: vec![5; 10],
            },
            Frame::RegisterRequest {
                tunnel_id: 7,
                user_id: "alice".into(),
                enc_payload: vec![6; 33],
            },
            Frame::RegisterResponse {
                otp_params: "otp/v1;seed=ab;n=100".into(),
            },
            Frame::LoginRequest {
                tunnel_id: 8,
                user_id: "alice".into(),
                enc_payload: vec![7; 21],
            },
            Frame::LoginResponse { session_id: 3 },
            Frame::VisitRequest {
                session_id: 3,
                site_id: "bank.example".into(),
                kind: "login".into(),
            },
            Frame::PageResponse {
                page_token: 11,
                site_id: "bank.example".into(),
                kind: "login".into(),
                fields: vec![("username".into(), "ab12".into()), ("password".into(), "cd34".into())],
                credential_fields: vec!["username".into(), "password".into()],
                old_credential_fields: vec![],
            },
            Frame::EnrollRequest {
                session_id: 3,
                page_token: 11,
                enc_cred: vec![8; 50],
            },
            Frame::SubmitRequest {
                session_id: 3,
                page_token: 12,
            },
            Frame::UpdateRequest {
                session_id: 3,
                page_token: 13,
                enc_new_cred: vec![9; 50],
            },
            Frame::TargetResult {
                ok: true,
                detail: "authenticated".into(),
            },
            Frame::error(codes::REPLAY, "tunnel already used"),
            Frame::TargetConnect,
            Frame::TargetWelcome {
                site_id: "bank.example".into(),
                cert: vec![1; 30],
                login_schema: vec![2; 10],
                update_schema: vec![3; 12],
            },
            Frame::TargetSubmit {
                kind: "login".into(),
                fields: vec![("username".into(), "alice".into())],
            },
        ]
    }

    #[test]
    fn every_frame_round_trips() {
        for frame in samples() {
            let bytes = frame.encode();
            assert_eq!(Frame::decode(&bytes).unwrap(), frame, "{}", frame.kind());
        }
    }

    #[test]
    fn tags_are_unique() {
        let mut seen = std::collections::BTreeSet::new();
        for frame in samples() {
            assert!(seen.insert(frame.tag()), "duplicate tag {}", frame.tag());
        }
    }

    #[test]
    fn unknown_tag_is_rejected() {
        assert_eq!(Frame::decode(&[99]).unwrap_err(), FrameError::UnknownTag(99));
    }

    #[test]
    fn truncation_is_rejected_everywhere() {
        for frame in samples() {
            let bytes = frame.encode();
            for cut in 0..bytes.len() {
                assert!(
                    Frame::decode(&bytes[..cut]).is_err(),
                    "{} survived truncation to {cut}",
                    frame.kind()
                );
            }
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        for frame in samples() {
            let mut bytes = frame.encode();
            bytes.push(0);
            assert!(Frame::decode(&bytes).is_err(), "{}", frame.kind());
        }
    }

    #[test]
    fn replay_sensitivity_covers_credential_and_evidence_frames() {
        let sensitive: Vec<&str> = samples()
            .iter()
            .filter(|f| f.is_replay_sensitive())
            .map(|f| f.kind())
            .collect();
        assert_eq!(
            sensitive,
            vec![
                "attest-response",
                "register-request",
                "login-request",
                "enroll-request",
                "submit-request",
                "update-request",
            ]
        );
    }
}
