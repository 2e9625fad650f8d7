//! Page schemas and the form engine.
//!
//! Simulated sites publish explicit schemas for their login and update
//! pages instead of HTML the proxy would have to parse; the engine's job is
//! deciding what to render into each field. Real credentials never render:
//! fields the proxy manages get fresh random dummy values, everything else
//! is empty.

use rand_core::RngCore;
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PageKind {
    Login,
    Update,
    Other,
}

impl PageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PageKind::Login => "login",
            PageKind::Update => "update",
            PageKind::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<PageKind> {
        Some(match s {
            "login" => PageKind::Login,
            "update" => PageKind::Update,
            "other" => PageKind::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema malformed: {0}")]
    Malformed(#[from] WireError),
    #[error("unknown page kind")]
    BadKind,
    #[error("schema invalid: {0}")]
    Invalid(&'static str),
}

/// What one page looks like: its fields, and which of them the proxy
/// manages. `old_credential_fields` only appears on update pages, naming
/// the current-credential inputs the proxy fills with dummies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormSchema {
    pub page_kind: PageKind,
    pub field_names: Vec<String>,
    pub credential_fields: Vec<String>,
    pub old_credential_fields: Vec<String>,
}

impl FormSchema {
    pub fn login(field_names: &[&str], credential_fields: &[&str]) -> FormSchema {
        FormSchema {
            page_kind: PageKind::Login,
            field_names: field_names.iter().map(|s| s.to_string()).collect(),
            credential_fields: credential_fields.iter().map(|s| s.to_string()).collect(),
            old_credential_fields: Vec::new(),
        }
    }

    pub fn update(
        field_names: &[&str],
        credential_fields: &[&str],
        old_credential_fields: &[&str],
    ) -> FormSchema {
        FormSchema {
            page_kind: PageKind::Update,
            field_names: field_names.iter().map(|s| s.to_string()).collect(),
            credential_fields: credential_fields.iter().map(|s| s.to_string()).collect(),
            old_credential_fields: old_credential_fields.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let known = |name: &String| self.field_names.contains(name);
        if !self.credential_fields.iter().all(known) {
            return Err(SchemaError::Invalid("credential field not on the page"));
        }
        if !self.old_credential_fields.iter().all(known) {
            return Err(SchemaError::Invalid("old-credential field not on the page"));
        }
        if self.page_kind != PageKind::Other && self.credential_fields.is_empty() {
            return Err(SchemaError::Invalid("credential fields required"));
        }
        if self.page_kind != PageKind::Update && !self.old_credential_fields.is_empty() {
            return Err(SchemaError::Invalid("old-credential fields only on update pages"));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(self.page_kind.as_str());
        for list in [&self.field_names, &self.credential_fields, &self.old_credential_fields] {
            w.u32(list.len() as u32);
            for name in list {
                w.str(name);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<FormSchema, SchemaError> {
        let mut r = Reader::new(bytes);
        let page_kind = PageKind::parse(&r.str()?).ok_or(SchemaError::BadKind)?;
        let mut lists: Vec<Vec<String>> = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.u32()?;
            let mut list = Vec::with_capacity(count as usize);
            for _ in 0..count {
                list.push(r.str()?);
            }
            lists.push(list);
        }
        r.finish()?;
        let schema = FormSchema {
            page_kind,
            old_credential_fields: lists.pop().unwrap(),
            credential_fields: lists.pop().unwrap(),
            field_names: lists.pop().unwrap(),
        };
        schema.validate()?;
        Ok(schema)
    }
}

/// A fresh dummy credential: 16 lowercase hex chars, drawn per render so
/// two renders of the same page never show the same placeholder.
pub fn dummy_value(rng: &mut dyn RngCore) -> String {
    let mut bytes = [0u8; 8];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

/// Render a page: returns (field name, rendered value) in schema order.
/// Managed fields show dummies only when a stored record exists (a login
/// page) or in the old-credential group (an update page); everything else
/// renders empty for the user to fill.
pub fn render(schema: &FormSchema, has_record: bool, rng: &mut dyn RngCore) -> Vec<(String, String)> {
    schema
        .field_names
        .iter()
        .map(|name| {
            let dummy = match schema.page_kind {
                PageKind::Login => has_record && schema.credential_fields.contains(name),
                PageKind::Update => has_record && schema.old_credential_fields.contains(name),
                PageKind::Other => false,
            };
            let value = if dummy { dummy_value(rng) } else { String::new() };
            (name.clone(), value)
        })
        .collect()
}

/// Update pages name their new-credential inputs `new_<field>`, where
/// `<field>` is the login-page field the value replaces. This is how an
/// accepted update maps back onto the stored credential set.
pub fn update_field_target(name: &str) -> Option<&str> {
    name.strip_prefix("new_")
}
