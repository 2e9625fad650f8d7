//! Envelope files: the security kernel's only I/O channel.
//!
//! The invoking module writes one input envelope file, the kernel runs, and
//! the kernel's answer is written to one output envelope file. An envelope
//! is a canonical binary record — `PALE` magic, a format version, a one-byte
//! option selecting the operation block, and a name-sorted field map — so
//! identical logical content always produces identical bytes (envelope bytes
//! end up hashed and sealed, where any encoding freedom would be a bug).
//!
//! Field names per option form a closed schema. Unknown fields, missing
//! fields, or an unknown option are rejected before any block runs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

pub const ENVELOPE_MAGIC: &[u8; 4] = b"PALE";
pub const ENVELOPE_VERSION: u8 = 1;

/// Operation selector. `Error` appears only in output envelopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PalOption {
    Error,
    InitialSealing,
    SecureTunnel,
    DataExtraction,
    Registration,
    Authentication,
    CredentialDecryption,
}

impl PalOption {
    pub fn code(self) -> u8 {
        match self {
            PalOption::Error => 0,
            PalOption::InitialSealing => 1,
            PalOption::SecureTunnel => 2,
            PalOption::DataExtraction => 3,
            PalOption::Registration => 4,
            PalOption::Authentication => 5,
            PalOption::CredentialDecryption => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<PalOption> {
        Some(match code {
            0 => PalOption::Error,
            1 => PalOption::InitialSealing,
            2 => PalOption::SecureTunnel,
            3 => PalOption::DataExtraction,
            4 => PalOption::Registration,
            5 => PalOption::Authentication,
            6 => PalOption::CredentialDecryption,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PalOption::Error => "error",
            PalOption::InitialSealing => "initial_sealing",
            PalOption::SecureTunnel => "secure_tunnel",
            PalOption::DataExtraction => "data_extraction",
            PalOption::Registration => "registration",
            PalOption::Authentication => "authentication",
            PalOption::CredentialDecryption => "credential_decryption",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("envelope bytes malformed: {0}")]
    Malformed(#[from] WireError),
    #[error("bad envelope magic")]
    BadMagic,
    #[error("unsupported envelope version {0}")]
    BadVersion(u8),
    #[error("unknown option code {0}")]
    UnknownOption(u8),
    #[error("option {option}: unknown field {field:?}")]
    UnknownField { option: &'static str, field: String },
    #[error("option {option}: missing field {field:?}")]
    MissingField { option: &'static str, field: &'static str },
}

/// Input schema per option: (required field names, optional field names).
/// `Error` has no input schema — it is never a valid request.
fn input_schema(option: PalOption) -> Option<(&'static [&'static str], &'static [&'static str])> {
    Some(match option {
        PalOption::Error => return None,
        PalOption::InitialSealing => (&["pm_pub"][..], &[][..]),
        PalOption::SecureTunnel => (&[][..], &[][..]),
        PalOption::DataExtraction => (&["enc_data", "nonce", "sealed_pal_priv"][..], &[][..]),
        PalOption::Registration => (
            &["enc_payload", "nonce", "sealed_pal_priv"][..],
            &["sealed_pass_list"][..],
        ),
        PalOption::Authentication => (
            &["enc_payload", "nonce", "sealed_pal_priv", "sealed_pass_list"][..],
            &[][..],
        ),
        PalOption::CredentialDecryption => (
            &["enc_cred", "nonce", "nonce_prime", "sealed_pal_priv", "sealed_pm_pub"][..],
            &[][..],
        ),
    })
}

/// Output schema per option (all fields required).
fn output_schema(option: PalOption) -> &'static [&'static str] {
    match option {
        PalOption::Error => &["code", "detail"],
        PalOption::InitialSealing => &["sealed_pm_pub"],
        PalOption::SecureTunnel => &["nonce", "pal_pub", "sealed_pal_priv"],
        PalOption::DataExtraction => &["receipt"],
        PalOption::Registration => &["otp_params", "sealed_pass_list"],
        PalOption::Authentication => &["sealed_pass_list", "user_id", "verdict"],
        PalOption::CredentialDecryption => &["enc_cred_pm"],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PalEnvelope {
    pub option: PalOption,
    pub fields: BTreeMap<String, Vec<u8>>,
}

impl PalEnvelope {
    pub fn new(option: PalOption) -> PalEnvelope {
        PalEnvelope {
            option,
            fields: BTreeMap::new(),
        }
    }

    pub fn with_field(mut self, name: &str, value: impl Into<Vec<u8>>) -> PalEnvelope {
        self.fields.insert(name.to_string(), value.into());
        self
    }

    pub fn field(&self, name: &str) -> Option<&[u8]> {
        self.fields.get(name).map(Vec::as_slice)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(ENVELOPE_MAGIC).u8(ENVELOPE_VERSION).u8(self.option.code());
        w.field_map(&self.fields);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<PalEnvelope, EnvelopeError> {
        let mut r = Reader::new(bytes);
        if r.raw(4)? != ENVELOPE_MAGIC {
            return Err(EnvelopeError::BadMagic);
        }
        let version = r.u8()?;
        if version != ENVELOPE_VERSION {
            return Err(EnvelopeError::BadVersion(version));
        }
        let code = r.u8()?;
        let option = PalOption::from_code(code).ok_or(EnvelopeError::UnknownOption(code))?;
        let fields = r.field_map()?;
        r.finish()?;
        Ok(PalEnvelope { option, fields })
    }

    /// Enforce the closed input schema for this envelope's option.
    pub fn check_input_schema(&self) -> Result<(), EnvelopeError> {
        let (required, optional) =
            input_schema(self.option).ok_or(EnvelopeError::UnknownOption(self.option.code()))?;
        check_fields(self.option.name(), &self.fields, required, optional)
    }

    /// Enforce the output schema (exact field set) for this option.
    pub fn check_output_schema(&self) -> Result<(), EnvelopeError> {
        check_fields(self.option.name(), &self.fields, output_schema(self.option), &[])
    }
}

fn check_fields(
    option: &'static str,
    fields: &BTreeMap<String, Vec<u8>>,
    required: &[&'static str],
    optional: &[&'static str],
) -> Result<(), EnvelopeError> {
    for name in fields.keys() {
        if !required.contains(&name.as_str()) && !optional.contains(&name.as_str()) {
            return Err(EnvelopeError::UnknownField {
                option,
                field: name.clone(),
            });
        }
    }
    for name in required {
        if !fields.contains_key(*name) {
            return Err(EnvelopeError::MissingField { option, field: name });
        }
    }
    Ok(())
}
