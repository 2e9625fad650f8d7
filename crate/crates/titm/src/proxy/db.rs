//! Proxy persistence: an append-friendly record file.
//!
//! Everything the proxy stores is already sealed or encrypted before it
//! reaches this layer, so the file needs no secrecy of its own — but it
//! does need freshness. Inserts append; any overwrite (a credential
//! update, a re-registration) rewrites the whole file through a temp file
//! and rename so the superseded ciphertext physically disappears rather
//! than lingering as a dead record an attacker could resurrect.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::crypto::{CryptoError, Nonce};
use crate::tpm::SealedBlob;
use crate::wire::{Reader, WireError, Writer};

use super::forms::{FormSchema, SchemaError};

const DB_MAGIC: &[u8; 4] = b"TIMD";
const DB_VERSION: u8 = 1;

const REC_SEALED_PM_PUB: u8 = 1;
const REC_PASS_LIST: u8 = 2;
const REC_CREDENTIAL: u8 = 3;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("database malformed: {0}")]
    Malformed(#[from] WireError),
    #[error("database malformed: {0}")]
    BadBlob(#[from] CryptoError),
    #[error("database malformed: {0}")]
    BadSchema(#[from] SchemaError),
    #[error("bad database header")]
    BadHeader,
    #[error("unknown record type {0}")]
    UnknownRecord(u8),
}

/// One stored credential: the ciphertext as produced inside the kernel,
/// plus the sealed key material and nonce needed to open it there again,
/// plus the page schema it belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CredentialRecord {
    pub user_id: String,
    pub site_id: String,
    pub enc_cred: Vec<u8>,
    pub sealed_pal_priv: SealedBlob,
    pub nonce: Nonce,
    pub schema: FormSchema,
}

impl CredentialRecord {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(&self.user_id);
        w.str(&self.site_id);
        w.bytes(&self.enc_cred);
        w.bytes(&self.sealed_pal_priv.encode());
        w.raw(self.nonce.as_bytes());
        w.bytes(&self.schema.encode());
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<CredentialRecord, DbError> {
        let mut r = Reader::new(bytes);
        let user_id = r.str()?;
        let site_id = r.str()?;
        let enc_cred = r.bytes()?;
        let sealed_pal_priv = SealedBlob::decode(&r.bytes()?)?;
        let nonce = Nonce::from_slice(r.raw(20)?)?;
        let schema = FormSchema::decode(&r.bytes()?)?;
        r.finish()?;
        Ok(CredentialRecord { user_id, site_id, enc_cred, sealed_pal_priv, nonce, schema })
    }
}

/// The in-memory view of the database file. Mutations write through to
/// disk before returning so a crash never loses acknowledged state.
pub struct Database {
    path: PathBuf,
    sealed_pm_pub: Option<SealedBlob>,
    pass_list: Option<SealedBlob>,
    credentials: BTreeMap<(String, String), CredentialRecord>,
}

impl Database {
    /// Open the database at `path`, creating an empty one if absent.
    pub fn open(path: &Path) -> Result<Database, DbError> {
        let mut db = Database {
            path: path.to_path_buf(),
            sealed_pm_pub: None,
            pass_list: None,
            credentials: BTreeMap::new(),
        };
        match fs::read(path) {
            Ok(bytes) => db.load(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => db.rewrite()?,
            Err(e) => return Err(e.into()),
        }
        Ok(db)
    }

    fn load(&mut self, bytes: &[u8]) -> Result<(), DbError> {
        let mut r = Reader::new(bytes);
        if r.raw(4).map_err(|_| DbError::BadHeader)? != DB_MAGIC {
            return Err(DbError::BadHeader);
        }
        if r.u8().map_err(|_| DbError::BadHeader)? != DB_VERSION {
            return Err(DbError::BadHeader);
        }
        while r.remaining() > 0 {
            let body = r.bytes()?;
            let mut rec = Reader::new(&body);
            let kind = rec.u8()?;
            let payload = rec.bytes()?;
            rec.finish()?;
            // Later records win: an appended record supersedes an earlier
            // one with the same key.
            match kind {
                REC_SEALED_PM_PUB => self.sealed_pm_pub = Some(SealedBlob::decode(&payload)?),
                REC_PASS_LIST => self.pass_list = Some(SealedBlob::decode(&payload)?),
                REC_CREDENTIAL => {
                    let cred = CredentialRecord::decode(&payload)?;
                    self.credentials
                        .insert((cred.user_id.clone(), cred.site_id.clone()), cred);
                }
                other => return Err(DbError::UnknownRecord(other)),
            }
        }
        Ok(())
    }

    fn header() -> Vec<u8> {
        let mut out = Vec::with_capacity(5);
        out.extend_from_slice(DB_MAGIC);
        out.push(DB_VERSION);
        out
    }

    fn record(kind: u8, payload: &[u8]) -> Vec<u8> {
        let mut body = Writer::new();
        body.u8(kind);
        body.bytes(payload);
        let body = body.finish();
        let mut w = Writer::new();
        w.bytes(&body);
        w.finish()
    }

    fn append(&self, kind: u8, payload: &[u8]) -> Result<(), DbError> {
        let mut file = fs::OpenOptions::new().append(true).open(&self.path)?;
        file.write_all(&Self::record(kind, payload))?;
        file.sync_all()?;
        Ok(())
    }

    /// Serialize the full current state and replace the file atomically.
    /// Records are written in a deterministic order so identical state
    /// always produces identical bytes.
    fn rewrite(&self) -> Result<(), DbError> {
        let mut out = Self::header();
        if let Some(blob) = &self.sealed_pm_pub {
            out.extend_from_slice(&Self::record(REC_SEALED_PM_PUB, &blob.encode()));
        }
        if let Some(blob) = &self.pass_list {
            out.extend_from_slice(&Self::record(REC_PASS_LIST, &blob.encode()));
        }
        for cred in self.credentials.values() {
            out.extend_from_slice(&Self::record(REC_CREDENTIAL, &cred.encode()));
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&out)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn sealed_pm_pub(&self) -> Option<&SealedBlob> {
        self.sealed_pm_pub.as_ref()
    }

    pub fn set_sealed_pm_pub(&mut self, blob: SealedBlob) -> Result<(), DbError> {
        let replacing = self.sealed_pm_pub.is_some();
        self.sealed_pm_pub = Some(blob);
        if replacing {
            self.rewrite()
        } else {
            self.append(REC_SEALED_PM_PUB, &self.sealed_pm_pub.as_ref().unwrap().encode())
        }
    }

    pub fn pass_list(&self) -> Option<&SealedBlob> {
        self.pass_list.as_ref()
    }

    /// The pass list changes on every registration and login, always as a
    /// replacement; rewrite so the superseded blob is gone.
    pub fn set_pass_list(&mut self, blob: SealedBlob) -> Result<(), DbError> {
        self.pass_list = Some(blob);
        self.rewrite()
    }

    pub fn credential(&self, user_id: &str, site_id: &str) -> Option<&CredentialRecord> {
        self.credentials.get(&(user_id.to_string(), site_id.to_string()))
    }

    pub fn put_credential(&mut self, record: CredentialRecord) -> Result<(), DbError> {
        let key = (record.user_id.clone(), record.site_id.clone());
        let replacing = self.credentials.contains_key(&key);
        let payload = record.encode();
        self.credentials.insert(key, record);
        if replacing {
            self.rewrite()
        } else {
            self.append(REC_CREDENTIAL, &payload)
        }
    }

    /// Raw bytes currently on disk, for integrity checks in tests.
    pub fn disk_bytes(&self) -> Result<Vec<u8>, DbError> {
        Ok(fs::read(&self.path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, KeyPurpose};
    use crate::proxy::forms::FormSchema;
    use crate::tpm::{TpmEmulator, PCR_DRTM};
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn fixture() -> (TpmEmulator, tempfile::TempDir) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ca = generate_keypair(KeyPurpose::Ek, &mut rng);
        let tpm = TpmEmulator::new(&ca, ChaCha20Rng::seed_from_u64(12));
        (tpm, tempfile::tempdir().unwrap())
    }

    fn sample_blob(tpm: &mut TpmEmulator, data: &[u8]) -> SealedBlob {
        tpm.seal(data, PCR_DRTM).unwrap()
    }

    fn sample_cred(tpm: &mut TpmEmulator, user: &str, site: &str, ct: &[u8]) -> CredentialRecord {
        CredentialRecord {
            user_id: user.into(),
            site_id: site.into(),
            enc_cred: ct.to_vec(),
            sealed_pal_priv: sample_blob(tpm, b"key material"),
            nonce: Nonce([7u8; 20]),
            schema: FormSchema::login(&["username", "password"], &["username", "password"]),
        }
    }

    #[test]
    fn state_survives_reopen() {
        let (mut tpm, dir) = fixture();
        let path = dir.path().join("proxy.db");
        {
            let mut db = Database::open(&path).unwrap();
            db.set_sealed_pm_pub(sample_blob(&mut tpm, b"pm pub")).unwrap();
            db.set_pass_list(sample_blob(&mut tpm, b"pass list")).unwrap();
            db.put_credential(sample_cred(&mut tpm, "alice", "bank.example", b"ct-1")).unwrap();
        }
        let db = Database::open(&path).unwrap();
        assert!(db.sealed_pm_pub().is_some());
        assert!(db.pass_list().is_some());
        let cred = db.credential("alice", "bank.example").unwrap();
        assert_eq!(cred.enc_cred, b"ct-1");
        assert!(db.credential("alice", "mail.example").is_none());
    }

    #[test]
    fn update_scrubs_old_ciphertext_from_disk() {
        let (mut tpm, dir) = fixture();
        let path = dir.path().join("proxy.db");
        let mut db = Database::open(&path).unwrap();
        let old_ct = b"old-secret-ciphertext-bytes";
        db.put_credential(sample_cred(&mut tpm, "alice", "bank.example", old_ct)).unwrap();
        let on_disk = db.disk_bytes().unwrap();
        assert!(on_disk.windows(old_ct.len()).any(|w| w == old_ct));

        db.put_credential(sample_cred(&mut tpm, "alice", "bank.example", b"new-ct")).unwrap();
        let on_disk = db.disk_bytes().unwrap();
        assert!(
            !on_disk.windows(old_ct.len()).any(|w| w == old_ct),
            "superseded ciphertext must not survive an update"
        );
        assert_eq!(db.credential("alice", "bank.example").unwrap().enc_cred, b"new-ct");
    }

    #[test]
    fn pass_list_replacement_scrubs_old_blob() {
        let (mut tpm, dir) = fixture();
        let path = dir.path().join("proxy.db");
        let mut db = Database::open(&path).unwrap();
        let first = sample_blob(&mut tpm, b"first pass list");
        let first_bytes = first.encode();
        db.set_pass_list(first).unwrap();
        db.set_pass_list(sample_blob(&mut tpm, b"second pass list")).unwrap();
        let on_disk = db.disk_bytes().unwrap();
        assert!(!on_disk
            .windows(first_bytes.len())
            .any(|w| w == first_bytes.as_slice()));
    }

    #[test]
    fn inserts_append_without_rewriting() {
        let (mut tpm, dir) = fixture();
        let path = dir.path().join("proxy.db");
        let mut db = Database::open(&path).unwrap();
        db.put_credential(sample_cred(&mut tpm, "alice", "bank.example", b"a")).unwrap();
        let before = db.disk_bytes().unwrap();
        db.put_credential(sample_cred(&mut tpm, "alice", "mail.example", b"b")).unwrap();
        let after = db.disk_bytes().unwrap();
        assert_eq!(&after[..before.len()], before.as_slice());
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let (_, dir) = fixture();
        let path = dir.path().join("proxy.db");
        fs::write(&path, b"TIMDx").unwrap();
        assert!(matches!(Database::open(&path), Err(DbError::BadHeader)));
    }

    #[test]
    fn truncated_record_is_rejected() {
        let (mut tpm, dir) = fixture();
        let path = dir.path().join("proxy.db");
        {
            let mut db = Database::open(&path).unwrap();
            db.set_pass_list(sample_blob(&mut tpm, b"pass list")).unwrap();
        }
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(Database::open(&path).is_err());
    }
}
