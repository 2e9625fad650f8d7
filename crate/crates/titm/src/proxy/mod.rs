//! The proxy manager: the untrusted host application.
//!
//! The proxy terminates client connections, talks to target sites, stores
//! everything durable, and invokes the security kernel for each operation
//! that needs plaintext secrets. It is written to be *trustworthy* but the
//! design never *requires* trusting it: credentials reach it only as
//! ciphertext bound to kernel keys, and its claims about kernel verdicts
//! are checked against quoted launch logs.
//!
//! Lifecycle: [`Proxy::boot`] verifies the module manifest (trusted boot),
//! records the freshly generated host keypair in the key register, and has
//! the kernel seal the key's public half (initial sealing). After that,
//! [`Proxy::handle_frame`] serves the wire protocol:
//!
//! - tunnel establishment and attestation, with the launch gate held from
//!   key generation to quote so the quoted log still covers the binding;
//! - registration and login (login re-quotes the launch log and refuses to
//!   proceed unless the log's verdict entry matches the kernel's reply);
//! - page visits against certificate-checked targets, with dummy values
//!   rendered into every credential field;
//! - enrollment, submission, and update of stored credentials, each one a
//!   kernel round trip — stored ciphertext is opened only inside launches.
//!
//! Single-use state (pending tunnels, ready tunnels, page tokens) is
//! consumed on first use; replayed frames find nothing to act on.

pub mod config;
pub mod db;
pub mod flicker;
pub mod forms;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{
    self, hash, scrub, AsymKeyPair, Certificate, Digest, KeyPurpose, Nonce, PublicKey, DIGEST_LEN,
};
use crate::messages::{codes, ChannelError, Frame, TargetDirectory};
use crate::pal::{verdict_measurement, PalEnvelope, PalOption, LOG_LABEL_VERDICT, VERDICT_ACCEPT};
use crate::tpm::{SealedBlob, SharedTpm, PCR_DRTM, PCR_PROXY_KEY};
use crate::wire::{self, Reader};

use config::ProxyConfig;
use db::{CredentialRecord, Database, DbError};
use flicker::{Flicker, FlickerError, FlickerGuard};
use forms::{FormSchema, PageKind};

#[derive(Debug, Error)]
pub enum BootError {
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("manifest line {0} is not `module = digest`")]
    Manifest(usize),
    #[error("manifest has no entry for module {0:?}")]
    MissingEntry(String),
    #[error("module {module:?} does not match the manifest: expected {expected}, measured {actual}")]
    ModuleMismatch {
        module: String,
        expected: Digest,
        actual: Digest,
    },
    #[error("kernel invocation failed: {0}")]
    Flicker(#[from] FlickerError),
    #[error("kernel refused initial sealing: {code}: {detail}")]
    Kernel { code: String, detail: String },
    #[error("storage failure: {0}")]
    Db(#[from] DbError),
    #[error("boot steps ran out of order")]
    BootOrder,
}

/// What trusted boot verified: each module name with its measured digest.
#[derive(Clone, Debug)]
pub struct BootReport {
    pub modules: Vec<(String, Digest)>,
}

/// Parse a boot manifest: `module = hex-digest` lines, `#` comments.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, Digest>, BootError> {
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, hex) = line.split_once('=').ok_or(BootError::Manifest(idx + 1))?;
        let digest =
            Digest::from_hex(hex.trim()).map_err(|_| BootError::Manifest(idx + 1))?;
        entries.insert(name.trim().to_string(), digest);
    }
    Ok(entries)
}

/// Kernel key material a tunnel leaves behind on the proxy side: the sealed
/// private key and the freshness nonce that must accompany every use of it.
#[derive(Clone)]
struct TunnelArtifacts {
    sealed_pal_priv: SealedBlob,
    nonce: Nonce,
}

/// A tunnel between key generation and attestation. Holds the launch gate
/// so the quoted log still ends with this tunnel's binding entry.
struct PendingTunnel {
    tunnel_id: u64,
    endpoint: String,
    artifacts: TunnelArtifacts,
    guard: FlickerGuard,
    created: u64,
}

/// An attested tunnel waiting for its single registration or login. Not
/// endpoint-bound: possession of the kernel key is the credential here,
/// and the sessions minted from it are pinned to their endpoint anyway.
struct ReadyTunnel {
    artifacts: TunnelArtifacts,
}

/// An authenticated user. Keeps the login tunnel's key artifacts: add-on
/// payloads during this session are encrypted to that tunnel key.
struct Session {
    user_id: String,
    endpoint: String,
    artifacts: TunnelArtifacts,
    last_used: u64,
}

/// A rendered page waiting for its single enroll/submit/update action.
struct Page {
    session_id: u64,
    site_id: String,
    schema: FormSchema,
}

#[derive(Default)]
struct ProxyState {
    pending: Option<PendingTunnel>,
    ready: BTreeMap<u64, ReadyTunnel>,
    sessions: BTreeMap<u64, Session>,
    pages: BTreeMap<u64, Page>,
}

pub struct Proxy {
    cfg: ProxyConfig,
    ca_pub: PublicKey,
    flicker: Flicker,
    pm: Mutex<Option<AsymKeyPair>>,
    db: Mutex<Database>,
    state: Mutex<ProxyState>,
    rng: Mutex<ChaCha20Rng>,
    clock: AtomicU64,
    ids: AtomicU64,
    booted: AtomicBool,
}

impl Proxy {
    pub fn new(
        cfg: ProxyConfig,
        ca_pub: PublicKey,
        tpm: SharedTpm,
        rng: ChaCha20Rng,
    ) -> Result<Proxy, BootError> {
        let exchange_dir = cfg
            .db_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let flicker = Flicker::new(
            tpm,
            &cfg.pal_image,
            &cfg.flicker_image,
            &cfg.proxy_image,
            &exchange_dir,
        );
        let db = Database::open(&cfg.db_path)?;
        Ok(Proxy {
            cfg,
            ca_pub,
            flicker,
            pm: Mutex::new(None),
            db: Mutex::new(db),
            state: Mutex::new(ProxyState::default()),
            rng: Mutex::new(rng),
            clock: AtomicU64::new(0),
            ids: AtomicU64::new(0),
            booted: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.cfg
    }

    pub fn flicker(&self) -> &Flicker {
        &self.flicker
    }

    pub fn tpm(&self) -> &SharedTpm {
        self.flicker.tpm()
    }

    pub fn is_booted(&self) -> bool {
        self.booted.load(Ordering::SeqCst)
    }

    /// Move the proxy's tick clock forward (idle expiry, stale eviction).
    pub fn advance_clock(&self, ticks: u64) {
        self.clock.fetch_add(ticks, Ordering::Relaxed);
    }

    fn next_id(&self) -> u64 {
        self.ids.fetch_add(1, Ordering::Relaxed) + 1
    }

    // -----------------------------------------------------------------------
    // Boot

    /// Platform start: reset the register bank, measure the host and
    /// invocation-layer images, refuse to run anything the manifest does not
    /// endorse, and record the fresh host keypair in the key register.
    pub fn trusted_boot(&self) -> Result<BootReport, BootError> {
        self.tpm().lock().platform_reset();

        let manifest_text =
            fs::read_to_string(&self.cfg.manifest_path).map_err(|e| BootError::Io {
                path: self.cfg.manifest_path.display().to_string(),
                detail: e.to_string(),
            })?;
        let manifest = parse_manifest(&manifest_text)?;
        let images = self.flicker.measure_images()?;

        let mut report = BootReport { modules: Vec::new() };
        for (module, actual) in [
            ("proxy", images.proxy_digest),
            ("flicker", images.flicker_digest),
        ] {
            let expected = manifest
                .get(module)
                .ok_or_else(|| BootError::MissingEntry(module.to_string()))?;
            if *expected != actual {
                return Err(BootError::ModuleMismatch {
                    module: module.to_string(),
                    expected: *expected,
                    actual,
                });
            }
            report.modules.push((module.to_string(), actual));
        }

        let pm = crypto::generate_keypair(KeyPurpose::Proxy, &mut *self.rng.lock());
        {
            let mut tpm = self.tpm().lock();
            tpm.extend(0, "boot:proxy", &images.proxy_digest)
                .expect("static register index is valid");
            tpm.extend(0, "boot:flicker", &images.flicker_digest)
                .expect("static register index is valid");
            tpm.extend(
                PCR_PROXY_KEY,
                "boot:proxy-key",
                &hash(&pm.public.canonical_bytes()),
            )
            .expect("static register index is valid");
        }
        *self.pm.lock() = Some(pm);
        Ok(report)
    }

    /// Hand the host public key to the kernel for provenance-checked
    /// sealing. The sealed blob is what later credential operations use to
    /// address replies back to this boot's host key.
    pub fn initial_sealing(&self) -> Result<(), BootError> {
        let pm_pub = self
            .pm
            .lock()
            .as_ref()
            .ok_or(BootError::BootOrder)?
            .public
            .canonical_bytes();
        let request = PalEnvelope::new(PalOption::InitialSealing).with_field("pm_pub", pm_pub);
        let reply = self.flicker.invoke(&request)?;
        if reply.option == PalOption::Error {
            let (code, detail) = kernel_error_parts(&reply);
            return Err(BootError::Kernel { code: code.to_string(), detail });
        }
        let sealed = reply
            .field("sealed_pm_pub")
            .and_then(|b| SealedBlob::decode(b).ok())
            .ok_or_else(|| BootError::Kernel {
                code: codes::KERNEL.to_string(),
                detail: "sealing reply malformed".to_string(),
            })?;
        self.db.lock().set_sealed_pm_pub(sealed)?;
        self.booted.store(true, Ordering::SeqCst);
        Ok(())
    }

    pub fn boot(&self) -> Result<BootReport, BootError> {
        let report = self.trusted_boot()?;
        self.initial_sealing()?;
        Ok(report)
    }

    // -----------------------------------------------------------------------
    // Frame dispatch

    pub fn handle_frame(&self, from: &str, frame: Frame, targets: &dyn TargetDirectory) -> Frame {
        if !self.is_booted() {
            return Frame::error(codes::BAD_REQUEST, "proxy is not booted");
        }
        let now = self.clock.fetch_add(1, Ordering::Relaxed);
        match frame {
            Frame::TunnelRequest => self.on_tunnel_request(from, now),
            Frame::AttestChallenge { tunnel_id, client_nonce } => {
                self.on_attest_challenge(from, tunnel_id, &client_nonce)
            }
            Frame::RegisterRequest { tunnel_id, user_id: _, enc_payload } => {
                self.on_register(from, now, tunnel_id, &enc_payload)
            }
            Frame::LoginRequest { tunnel_id, user_id: _, enc_payload } => {
                self.on_login(from, now, tunnel_id, &enc_payload)
            }
            Frame::VisitRequest { session_id, site_id, kind } => {
                self.on_visit(from, now, session_id, &site_id, &kind, targets)
            }
            Frame::EnrollRequest { session_id, page_token, enc_cred } => {
                self.on_enroll(from, now, session_id, page_token, &enc_cred)
            }
            Frame::SubmitRequest { session_id, page_token } => {
                self.on_submit(from, now, session_id, page_token, targets)
            }
            Frame::UpdateRequest { session_id, page_token, enc_new_cred } => {
                self.on_update(from, now, session_id, page_token, &enc_new_cred, targets)
            }
            _ => Frame::error(codes::BAD_REQUEST, "unexpected frame"),
        }
    }

    // -----------------------------------------------------------------------
    // Gate policy

    /// Take the launch gate without ever blocking. A pending tunnel may be
    /// replaced by its own endpoint or evicted once stale; anything else
    /// still holding the gate means "busy, try again".
    fn acquire_gate(
        &self,
        state: &mut ProxyState,
        from: &str,
        now: u64,
        replace_own: bool,
    ) -> Result<FlickerGuard, Frame> {
        if let Some(pending) = &state.pending {
            let own = replace_own && pending.endpoint == from;
            let stale = now.saturating_sub(pending.created) >= self.cfg.tunnel_pending_ticks;
            if own || stale {
                state.pending = None; // releases the held guard
            } else {
                return Err(Frame::error(codes::BUSY, "a tunnel is being established"));
            }
        }
        self.flicker
            .try_guard()
            .ok_or_else(|| Frame::error(codes::BUSY, "kernel is busy"))
    }

    /// One kernel round trip under an already-held gate, expecting `want`.
    /// Kernel-side refusals come back as ready-to-send error frames.
    fn kernel_invoke(
        &self,
        guard: &FlickerGuard,
        request: &PalEnvelope,
        want: PalOption,
    ) -> Result<PalEnvelope, Frame> {
        let reply = match self.flicker.invoke_locked(guard, request) {
            Ok(reply) => reply,
            Err(FlickerError::Io { .. }) => {
                return Err(Frame::error(codes::STORAGE, "kernel exchange failed"))
            }
            Err(_) => return Err(Frame::error(codes::KERNEL, "kernel invocation failed")),
        };
        if reply.option == PalOption::Error {
            let (code, detail) = kernel_error_parts(&reply);
            return Err(Frame::error(code, detail));
        }
        if reply.option != want {
            return Err(Frame::error(codes::KERNEL, "kernel replied out of protocol"));
        }
        Ok(reply)
    }

    // -----------------------------------------------------------------------
    // Tunnel establishment

    fn on_tunnel_request(&self, from: &str, now: u64) -> Frame {
        let mut state = self.state.lock();
        let guard = match self.acquire_gate(&mut state, from, now, true) {
            Ok(g) => g,
            Err(e) => return e,
        };
        let reply = match self.kernel_invoke(
            &guard,
            &PalEnvelope::new(PalOption::SecureTunnel),
            PalOption::SecureTunnel,
        ) {
            Ok(r) => r,
            Err(e) => return e,
        };
        let parsed = (|| {
            let pal_pub = reply.field("pal_pub")?.to_vec();
            let sealed = SealedBlob::decode(reply.field("sealed_pal_priv")?).ok()?;
            let nonce = Nonce::from_slice(reply.field("nonce")?).ok()?;
            Some((pal_pub, sealed, nonce))
        })();
        let Some((pal_pub, sealed_pal_priv, nonce)) = parsed else {
            return Frame::error(codes::KERNEL, "tunnel reply malformed");
        };
        let tunnel_id = self.next_id();
        state.pending = Some(PendingTunnel {
            tunnel_id,
            endpoint: from.to_string(),
            artifacts: TunnelArtifacts { sealed_pal_priv, nonce },
            guard,
            created: now,
        });
        Frame::TunnelOffer { tunnel_id, pal_pub, nonce }
    }

    fn on_attest_challenge(&self, from: &str, tunnel_id: u64, client_nonce: &Nonce) -> Frame {
        let mut state = self.state.lock();
        match state.pending.take() {
            Some(pending) if pending.tunnel_id == tunnel_id && pending.endpoint == from => {
                let (quote, sml) = {
                    let tpm = self.tpm().lock();
                    let quote = tpm
                        .quote(PCR_DRTM, client_nonce)
                        .expect("launch register index is valid");
                    let sml = tpm.sml(PCR_DRTM).expect("launch register index is valid");
                    (quote, sml)
                };
                state.ready.insert(tunnel_id, ReadyTunnel { artifacts: pending.artifacts });
                drop(pending.guard);
                Frame::AttestResponse {
                    tunnel_id,
                    quote: quote.encode(),
                    sml: sml.encode(),
                }
            }
            other => {
                state.pending = other;
                Frame::error(codes::BAD_REQUEST, "no such pending tunnel")
            }
        }
    }

    // -----------------------------------------------------------------------
    // Registration and login

    fn on_register(&self, from: &str, now: u64, tunnel_id: u64, enc_payload: &[u8]) -> Frame {
        let mut state = self.state.lock();
        let Some(tunnel) = state.ready.remove(&tunnel_id) else {
            return Frame::error(codes::REPLAY, "tunnel unknown or already used");
        };
        let mut request = PalEnvelope::new(PalOption::Registration)
            .with_field("enc_payload", enc_payload.to_vec())
            .with_field("nonce", tunnel.artifacts.nonce.as_bytes().to_vec())
            .with_field("sealed_pal_priv", tunnel.artifacts.sealed_pal_priv.encode());
        if let Some(list) = self.db.lock().pass_list() {
            request = request.with_field("sealed_pass_list", list.encode());
        }
        let guard = match self.acquire_gate(&mut state, from, now, false) {
            Ok(g) => g,
            Err(e) => return e,
        };
        let reply = match self.kernel_invoke(&guard, &request, PalOption::Registration) {
            Ok(r) => r,
            Err(e) => return e,
        };
        drop(guard);
        let parsed = (|| {
            let params = String::from_utf8(reply.field("otp_params")?.to_vec()).ok()?;
            let list = SealedBlob::decode(reply.field("sealed_pass_list")?).ok()?;
            Some((params, list))
        })();
        let Some((otp_params, sealed_list)) = parsed else {
            return Frame::error(codes::KERNEL, "registration reply malformed");
        };
        if self.db.lock().set_pass_list(sealed_list).is_err() {
            return Frame::error(codes::STORAGE, "could not persist the password list");
        }
        Frame::RegisterResponse { otp_params }
    }

    fn on_login(&self, from: &str, now: u64, tunnel_id: u64, enc_payload: &[u8]) -> Frame {
        let mut state = self.state.lock();
        let Some(tunnel) = state.ready.remove(&tunnel_id) else {
            return Frame::error(codes::REPLAY, "tunnel unknown or already used");
        };
        let Some(list) = self.db.lock().pass_list().cloned() else {
            return Frame::error(codes::AUTH_REFUSED, "no registered users");
        };
        let request = PalEnvelope::new(PalOption::Authentication)
            .with_field("enc_payload", enc_payload.to_vec())
            .with_field("nonce", tunnel.artifacts.nonce.as_bytes().to_vec())
            .with_field("sealed_pal_priv", tunnel.artifacts.sealed_pal_priv.encode())
            .with_field("sealed_pass_list", list.encode());

        // Hold the gate past the invocation: the quote below must cover
        // this launch's log, verdict entry included.
        let guard = match self.acquire_gate(&mut state, from, now, false) {
            Ok(g) => g,
            Err(e) => return e,
        };
        let reply = match self.kernel_invoke(&guard, &request, PalOption::Authentication) {
            Ok(r) => r,
            Err(e) => return e,
        };
        let self_nonce = Nonce::generate(&mut *self.rng.lock());
        let (quote, sml) = {
            let tpm = self.tpm().lock();
            let quote = tpm
                .quote(PCR_DRTM, &self_nonce)
                .expect("launch register index is valid");
            let sml = tpm.sml(PCR_DRTM).expect("launch register index is valid");
            (quote, sml)
        };
        drop(guard);

        let parsed = (|| {
            let verdict = reply.field("verdict")?;
            let accepted = match verdict {
                [b] => *b == VERDICT_ACCEPT,
                _ => return None,
            };
            let user_id = String::from_utf8(reply.field("user_id")?.to_vec()).ok()?;
            let sealed_list = SealedBlob::decode(reply.field("sealed_pass_list")?).ok()?;
            Some((accepted, user_id, sealed_list))
        })();
        let Some((accepted, user_id, sealed_list)) = parsed else {
            return Frame::error(codes::KERNEL, "authentication reply malformed");
        };

        // Self-attest before believing the reply: the quoted log must end
        // with a verdict entry matching what the reply claims. A host-side
        // rewrite of the kernel's output dies here.
        if crate::tpm::verify_quote(&quote, &self_nonce, &sml, &self.ca_pub).is_err() {
            return Frame::error(codes::ATTESTATION, "verdict quote failed verification");
        }
        let expected = verdict_measurement(accepted);
        let verdict_logged = matches!(
            sml.entries.last(),
            Some((label, measurement))
                if label == LOG_LABEL_VERDICT && *measurement == expected
        );
        if !verdict_logged {
            return Frame::error(
                codes::ATTESTATION,
                "kernel reply disagrees with the quoted verdict",
            );
        }

        if self.db.lock().set_pass_list(sealed_list).is_err() {
            return Frame::error(codes::STORAGE, "could not persist the password list");
        }
        if !accepted {
            return Frame::error(codes::AUTH_REFUSED, "credentials rejected");
        }
        let session_id = self.next_id();
        state.sessions.insert(
            session_id,
            Session {
                user_id,
                endpoint: from.to_string(),
                artifacts: tunnel.artifacts,
                last_used: now,
            },
        );
        Frame::LoginResponse { session_id }
    }

    // -----------------------------------------------------------------------
    // Session plumbing

    /// Validate a session reference and touch its idle timer; returns the
    /// session's user and tunnel artifacts.
    fn session_check(
        &self,
        state: &mut ProxyState,
        from: &str,
        now: u64,
        session_id: u64,
    ) -> Result<(String, TunnelArtifacts), Frame> {
        let expired = match state.sessions.get(&session_id) {
            Some(session) => {
                now.saturating_sub(session.last_used) > self.cfg.session_idle_ticks
            }
            None => false,
        };
        if expired {
            state.sessions.remove(&session_id);
        }
        match state.sessions.get_mut(&session_id) {
            Some(session) if session.endpoint == from => {
                session.last_used = now;
                Ok((session.user_id.clone(), session.artifacts.clone()))
            }
            _ => Err(Frame::error(codes::NOT_AUTHENTICATED, "no such session")),
        }
    }

    /// Consume a single-use page token belonging to `session_id`.
    fn page_take(
        &self,
        state: &mut ProxyState,
        session_id: u64,
        page_token: u64,
        want: PageKind,
    ) -> Result<Page, Frame> {
        let Some(page) = state.pages.remove(&page_token) else {
            return Err(Frame::error(codes::REPLAY, "page token unknown or already used"));
        };
        if page.session_id != session_id {
            return Err(Frame::error(codes::BAD_REQUEST, "page belongs to another session"));
        }
        if page.schema.page_kind != want {
            return Err(Frame::error(codes::BAD_REQUEST, "wrong page kind for this action"));
        }
        Ok(page)
    }

    // -----------------------------------------------------------------------
    // Visits

    fn on_visit(
        &self,
        from: &str,
        now: u64,
        session_id: u64,
        site_id: &str,
        kind: &str,
        targets: &dyn TargetDirectory,
    ) -> Frame {
        let mut state = self.state.lock();
        let (user_id, _) = match self.session_check(&mut state, from, now, session_id) {
            Ok(v) => v,
            Err(e) => return e,
        };
        let Some(kind) = PageKind::parse(kind).filter(|k| *k != PageKind::Other) else {
            return Frame::error(codes::BAD_REQUEST, "unknown page kind");
        };

        let welcome = match targets.request(site_id, Frame::TargetConnect) {
            Ok(frame) => frame,
            Err(ChannelError::Unreachable(_)) => {
                return Frame::error(codes::UNKNOWN_SITE, "no such site")
            }
            Err(_) => return Frame::error(codes::UNKNOWN_SITE, "site connection failed"),
        };
        let Frame::TargetWelcome { site_id: welcome_id, cert, login_schema, update_schema } =
            welcome
        else {
            return Frame::error(codes::BAD_REQUEST, "target did not introduce itself");
        };

        // The certificate must verify under the shared authority and name
        // the site the client asked for; anything else is an impostor.
        let cert_ok = Certificate::decode(&cert)
            .ok()
            .filter(|c| c.verify(&self.ca_pub).is_ok())
            .filter(|c| c.subject_id == site_id && welcome_id == site_id)
            .is_some();
        if !cert_ok {
            return Frame::error(codes::CERTIFICATE_REFUSED, "target certificate rejected");
        }

        let schema_bytes = match kind {
            PageKind::Login => login_schema,
            PageKind::Update => update_schema,
            PageKind::Other => unreachable!("filtered above"),
        };
        let Ok(schema) = FormSchema::decode(&schema_bytes) else {
            return Frame::error(codes::BAD_REQUEST, "target page schema malformed");
        };
        if schema.page_kind != kind {
            return Frame::error(codes::BAD_REQUEST, "target page schema malformed");
        }

        let has_record = self.db.lock().credential(&user_id, site_id).is_some();
        let fields = forms::render(&schema, has_record, &mut *self.rng.lock());
        let page_token = self.next_id();
        let response = Frame::PageResponse {
            page_token,
            site_id: site_id.to_string(),
            kind: schema.page_kind.as_str().to_string(),
            fields,
            credential_fields: schema.credential_fields.clone(),
            old_credential_fields: schema.old_credential_fields.clone(),
        };
        state.pages.insert(
            page_token,
            Page {
                session_id,
                site_id: site_id.to_string(),
                schema,
            },
        );
        response
    }

    // -----------------------------------------------------------------------
    // Credential operations

    /// Run one credential-decryption round trip and return the decrypted
    /// field map. The kernel addresses its reply to this boot's host key
    /// and echoes a fresh nonce, so a recorded reply cannot be replayed.
    fn decrypt_credentials(
        &self,
        state: &mut ProxyState,
        from: &str,
        now: u64,
        enc_cred: &[u8],
        artifacts: &TunnelArtifacts,
    ) -> Result<BTreeMap<String, Vec<u8>>, Frame> {
        let Some(sealed_pm) = self.db.lock().sealed_pm_pub().cloned() else {
            return Err(Frame::error(codes::STORAGE, "host key is not sealed"));
        };
        let Some(pm) = self.pm.lock().clone() else {
            return Err(Frame::error(codes::BAD_REQUEST, "proxy is not booted"));
        };
        let nonce_prime = Nonce::generate(&mut *self.rng.lock());
        let request = PalEnvelope::new(PalOption::CredentialDecryption)
            .with_field("enc_cred", enc_cred.to_vec())
            .with_field("nonce", artifacts.nonce.as_bytes().to_vec())
            .with_field("nonce_prime", nonce_prime.as_bytes().to_vec())
            .with_field("sealed_pal_priv", artifacts.sealed_pal_priv.encode())
            .with_field("sealed_pm_pub", sealed_pm.encode());
        let guard = self.acquire_gate(state, from, now, false)?;
        let reply = self.kernel_invoke(&guard, &request, PalOption::CredentialDecryption)?;
        drop(guard);

        let Some(enc_cred_pm) = reply.field("enc_cred_pm") else {
            return Err(Frame::error(codes::KERNEL, "decryption reply malformed"));
        };
        let mut plain = crypto::decrypt(&pm.private, enc_cred_pm)
            .map_err(|_| Frame::error(codes::KERNEL, "decryption reply unreadable"))?;
        let parsed = (|| {
            let mut r = Reader::new(&plain);
            let creds = r.bytes().ok()?;
            let echoed = r.raw(DIGEST_LEN).ok()?.to_vec();
            r.finish().ok()?;
            Some((creds, echoed))
        })();
        let result = match parsed {
            Some((creds, echoed)) if echoed == nonce_prime.as_bytes() => {
                wire::decode_field_map(&creds)
                    .map_err(|_| Frame::error(codes::KERNEL, "credential fields malformed"))
            }
            Some(_) => Err(Frame::error(codes::REPLAY, "kernel reply is not fresh")),
            None => Err(Frame::error(codes::KERNEL, "decryption reply malformed")),
        };
        scrub(&mut plain);
        result
    }

    fn on_enroll(
        &self,
        from: &str,
        now: u64,
        session_id: u64,
        page_token: u64,
        enc_cred: &[u8],
    ) -> Frame {
        let mut state = self.state.lock();
        let (user_id, artifacts) = match self.session_check(&mut state, from, now, session_id) {
            Ok(v) => v,
            Err(e) => return e,
        };
        let page = match self.page_take(&mut state, session_id, page_token, PageKind::Login) {
            Ok(p) => p,
            Err(e) => return e,
        };

        // Prove the ciphertext is openable and shaped like this page's
        // credential set before storing it. The decrypted copy is discarded;
        // only the client's original ciphertext is kept.
        let mut fields =
            match self.decrypt_credentials(&mut state, from, now, enc_cred, &artifacts) {
                Ok(f) => f,
                Err(e) => return e,
            };
        let expected: std::collections::BTreeSet<&str> =
            page.schema.credential_fields.iter().map(String::as_str).collect();
        let got: std::collections::BTreeSet<&str> =
            fields.keys().map(String::as_str).collect();
        let shape_ok = expected == got;
        for value in fields.values_mut() {
            scrub(value);
        }
        if !shape_ok {
            return Frame::error(codes::BAD_REQUEST, "payload does not match the page fields");
        }

        let record = CredentialRecord {
            user_id,
            site_id: page.site_id,
            enc_cred: enc_cred.to_vec(),
            sealed_pal_priv: artifacts.sealed_pal_priv,
            nonce: artifacts.nonce,
            schema: page.schema,
        };
        if self.db.lock().put_credential(record).is_err() {
            return Frame::error(codes::STORAGE, "could not persist the credential record");
        }
        Frame::TargetResult { ok: true, detail: "credentials enrolled".to_string() }
    }

    fn on_submit(
        &self,
        from: &str,
        now: u64,
        session_id: u64,
        page_token: u64,
        targets: &dyn TargetDirectory,
    ) -> Frame {
        let mut state = self.state.lock();
        let (user_id, _) = match self.session_check(&mut state, from, now, session_id) {
            Ok(v) => v,
            Err(e) => return e,
        };
        let page = match self.page_take(&mut state, session_id, page_token, PageKind::Login) {
            Ok(p) => p,
            Err(e) => return e,
        };
        let Some(record) = self.db.lock().credential(&user_id, &page.site_id).cloned() else {
            return Frame::error(codes::BAD_REQUEST, "no enrolled credentials for this site");
        };
        let record_artifacts = TunnelArtifacts {
            sealed_pal_priv: record.sealed_pal_priv.clone(),
            nonce: record.nonce,
        };
        let mut creds = match self.decrypt_credentials(
            &mut state,
            from,
            now,
            &record.enc_cred,
            &record_artifacts,
        ) {
            Ok(f) => f,
            Err(e) => return e,
        };
        let fields = match text_fields_in_order(&record.schema.credential_fields, &creds) {
            Ok(f) => f,
            Err(e) => {
                scrub_map(&mut creds);
                return e;
            }
        };
        scrub_map(&mut creds);
        let result = targets.request(
            &page.site_id,
            Frame::TargetSubmit { kind: PageKind::Login.as_str().to_string(), fields },
        );
        relay_target_result(result)
    }

    fn on_update(
        &self,
        from: &str,
        now: u64,
        session_id: u64,
        page_token: u64,
        enc_new_cred: &[u8],
        targets: &dyn TargetDirectory,
    ) -> Frame {
        let mut state = self.state.lock();
        let (user_id, session_artifacts) =
            match self.session_check(&mut state, from, now, session_id) {
                Ok(v) => v,
                Err(e) => return e,
            };
        let page = match self.page_take(&mut state, session_id, page_token, PageKind::Update) {
            Ok(p) => p,
            Err(e) => return e,
        };
        let Some(record) = self.db.lock().credential(&user_id, &page.site_id).cloned() else {
            return Frame::error(codes::BAD_REQUEST, "no enrolled credentials for this site");
        };

        // Open the stored credentials (the "old" values)…
        let record_artifacts = TunnelArtifacts {
            sealed_pal_priv: record.sealed_pal_priv.clone(),
            nonce: record.nonce,
        };
        let mut old = match self.decrypt_credentials(
            &mut state,
            from,
            now,
            &record.enc_cred,
            &record_artifacts,
        ) {
            Ok(f) => f,
            Err(e) => return e,
        };
        // …and the client's new values, encrypted to this session's tunnel.
        let mut new = match self.decrypt_credentials(
            &mut state,
            from,
            now,
            enc_new_cred,
            &session_artifacts,
        ) {
            Ok(f) => f,
            Err(e) => {
                scrub_map(&mut old);
                return e;
            }
        };

        let composed = compose_update_submission(&page.schema, &record.schema, &old, &new);
        let (fields, rotated) = match composed {
            Ok(v) => v,
            Err(e) => {
                scrub_map(&mut old);
                scrub_map(&mut new);
                return e;
            }
        };
        scrub_map(&mut old);
        scrub_map(&mut new);

        let result = relay_target_result(targets.request(
            &page.site_id,
            Frame::TargetSubmit { kind: PageKind::Update.as_str().to_string(), fields },
        ));
        let accepted = matches!(result, Frame::TargetResult { ok: true, .. });
        if !accepted {
            return result;
        }

        // The target accepted the change; rotate the stored record under a
        // fresh kernel tunnel so the superseded ciphertext dies with its key.
        let guard = match self.acquire_gate(&mut state, from, now, false) {
            Ok(g) => g,
            Err(e) => return e,
        };
        let reply = match self.kernel_invoke(
            &guard,
            &PalEnvelope::new(PalOption::SecureTunnel),
            PalOption::SecureTunnel,
        ) {
            Ok(r) => r,
            Err(e) => return e,
        };
        drop(guard);
        let parsed = (|| {
            let pal_pub = PublicKey::from_canonical(reply.field("pal_pub")?).ok()?;
            let sealed = SealedBlob::decode(reply.field("sealed_pal_priv")?).ok()?;
            let nonce = Nonce::from_slice(reply.field("nonce")?).ok()?;
            Some((pal_pub, sealed, nonce))
        })();
        let Some((pal_pub, sealed_pal_priv, nonce)) = parsed else {
            return Frame::error(codes::KERNEL, "tunnel reply malformed");
        };
        let mut rotated_plain = wire::encode_field_map(&rotated);
        let enc_cred = crypto::encrypt(&pal_pub, &rotated_plain, &mut *self.rng.lock());
        scrub(&mut rotated_plain);
        let new_record = CredentialRecord {
            user_id,
            site_id: page.site_id,
            enc_cred,
            sealed_pal_priv,
            nonce,
            schema: record.schema,
        };
        if self.db.lock().put_credential(new_record).is_err() {
            return Frame::error(codes::STORAGE, "could not persist the rotated record");
        }
        result
    }
}

// ---------------------------------------------------------------------------
// Helpers

/// Extract (frame code, detail) from a kernel error envelope.
fn kernel_error_parts(reply: &PalEnvelope) -> (&'static str, String) {
    let code_byte = reply.field("code").and_then(|b| b.first()).copied().unwrap_or(0);
    let detail = reply
        .field("detail")
        .map(|b| String::from_utf8_lossy(b).into_owned())
        .unwrap_or_default();
    let code = match code_byte {
        2 => codes::BLOB_INTEGRITY,
        3 => codes::SEAL_VIOLATION,
        4 => codes::UNKNOWN_BLOB,
        5 => codes::REPLAY,
        6 => codes::KEY_PROVENANCE,
        _ => codes::KERNEL,
    };
    (code, detail)
}

fn scrub_map(map: &mut BTreeMap<String, Vec<u8>>) {
    for value in map.values_mut() {
        scrub(value);
    }
}

/// Pull `names` out of a decrypted field map as text, in the given order.
fn text_fields_in_order(
    names: &[String],
    map: &BTreeMap<String, Vec<u8>>,
) -> Result<Vec<(String, String)>, Frame> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let value = map
            .get(name)
            .and_then(|v| String::from_utf8(v.to_vec()).ok())
            .ok_or_else(|| Frame::error(codes::KERNEL, "stored credentials malformed"))?;
        out.push((name.clone(), value));
    }
    Ok(out)
}

/// Build the form submission for an update page, plus the rotated
/// credential set to store if the target accepts.
///
/// Page fields follow a naming convention: `old_<field>` renders the
/// stored value of `<field>`, `new_<field>` carries the client's
/// replacement for `<field>`. Stored fields referenced by neither (for the
/// common login schema, the username) are prepended as identity fields so
/// the target can locate the account.
fn compose_update_submission(
    page_schema: &FormSchema,
    record_schema: &FormSchema,
    old: &BTreeMap<String, Vec<u8>>,
    new: &BTreeMap<String, Vec<u8>>,
) -> Result<(Vec<(String, String)>, BTreeMap<String, Vec<u8>>), Frame> {
    let bad = || Frame::error(codes::BAD_REQUEST, "payload does not match the page fields");
    let text = |map: &BTreeMap<String, Vec<u8>>, key: &str| {
        map.get(key).and_then(|v| String::from_utf8(v.to_vec()).ok())
    };

    let mut referenced: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut fields = Vec::new();
    for name in &page_schema.field_names {
        if let Some(target) = name.strip_prefix("old_") {
            let value = text(old, target).ok_or_else(bad)?;
            referenced.insert(target.to_string());
            fields.push((name.clone(), value));
        } else if let Some(target) = forms::update_field_target(name) {
            let value = text(new, name).ok_or_else(bad)?;
            referenced.insert(target.to_string());
            fields.push((name.clone(), value));
        } else {
            fields.push((name.clone(), String::new()));
        }
    }
    // The client must send exactly the new_* fields the page declares.
    if new.len() != page_schema.credential_fields.len()
        || !page_schema.credential_fields.iter().all(|n| new.contains_key(n))
    {
        return Err(bad());
    }

    let mut identity = Vec::new();
    for name in &record_schema.credential_fields {
        if !referenced.contains(name) {
            let value = text(old, name).ok_or_else(bad)?;
            identity.push((name.clone(), value));
        }
    }
    identity.extend(fields);

    let mut rotated = old.clone();
    for name in &page_schema.credential_fields {
        let target = forms::update_field_target(name).ok_or_else(bad)?;
        if !rotated.contains_key(target) {
            return Err(bad());
        }
        rotated.insert(target.to_string(), new[name].clone());
    }
    Ok((identity, rotated))
}

fn relay_target_result(result: Result<Frame, ChannelError>) -> Frame {
    match result {
        Ok(frame @ Frame::TargetResult { .. }) => frame,
        Ok(_) => Frame::error(codes::BAD_REQUEST, "target replied out of protocol"),
        Err(ChannelError::Unreachable(_)) => Frame::error(codes::UNKNOWN_SITE, "no such site"),
        Err(_) => Frame::error(codes::UNKNOWN_SITE, "site connection failed"),
    }
}
