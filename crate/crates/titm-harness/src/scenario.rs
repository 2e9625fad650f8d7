//! The scenario catalog: one honest flow, the attack variants, and a
//! concurrency stress.
//!
//! Every scenario is a deterministic script over one or two installed
//! worlds. Attack scripts mutate only what a real attacker could reach —
//! artifact files on disk, register state, frames in flight, the kernel
//! exchange window, or stolen database files — never live code, so a rerun
//! with the same seed replays bit-exactly. A scenario passes when three
//! things hold: the observed outcome equals the expected one, the decisive
//! refusal happened where the script asserts it, and the leak sweep over
//! wires, files, and kernel envelopes comes back empty.

use std::fmt;
use std::fs;
use std::path::Path;

use rand_core::RngCore;
use thiserror::Error;

use titm::client::{Client, ClientError};
use titm::crypto::{generate_keypair, hash, KeyPurpose, Nonce};
use titm::messages::{codes, Frame};
use titm::otp::{self, OtpParams};
use titm::pal::{PalEnvelope, PalError, PalOption};
use titm::proxy::db::Database;
use titm::proxy::BootError;
use titm::tpm::{QuoteRejection, PCR_PROXY_KEY};

use crate::leak::{self, Finding};
use crate::sim::{Sim, TranscriptEntry};
use crate::world::{
    sub_rng, World, ATTACKER_ADDR, BANK_PASSWORD, BANK_PASSWORD_ROTATED, CLIENT_ADDR,
    FLICKER_IMAGE, KIOSK_ADDR, MAIL_PASSWORD, MASTER_PASSWORD, PAL_IMAGE, PROXY_IMAGE,
    SECRET_PHRASE, SITE_BANK, SITE_MAIL, USER_ID,
};

// ---------------------------------------------------------------------------
// Outcomes and reports

/// What a scenario run is observed to do, at the step that decides it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Every step succeeded and the final state checks held.
    FlowSucceeds,
    /// Startup measurement refused to bring the service up.
    DetectedAtBoot,
    /// The client rejected the attestation evidence.
    AttestationFailure,
    /// The sealing discipline refused: sealed state would not open against
    /// the live register bank, or a sealing request failed its register
    /// proof.
    SealViolation,
    /// A reused frame, quote, or one-time password was turned away.
    ReplayRejected,
    /// The request was refused upstream of authentication (denial of
    /// service at worst; no secrets moved).
    TunnelRefused,
    /// A target certificate failed verification, ending that site visit.
    CertificateRefused,
    /// Stored credential material stayed out of reach: blobs unusable or
    /// output undecryptable for the party attacking them.
    CredentialAccessBlocked,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::FlowSucceeds => "flow_succeeds",
            Outcome::DetectedAtBoot => "detected_at_boot",
            Outcome::AttestationFailure => "attestation_failure",
            Outcome::SealViolation => "seal_violation",
            Outcome::ReplayRejected => "replay_rejected",
            Outcome::TunnelRefused => "tunnel_refused",
            Outcome::CertificateRefused => "certificate_refused",
            Outcome::CredentialAccessBlocked => "credential_access_blocked",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A broken script, as opposed to a scenario that ran and failed: some
/// precondition the attack needs could not be set up.
#[derive(Debug, Error)]
#[error("scenario script error: {0}")]
pub struct ScriptError(pub String);

/// Shorthand for script steps that must succeed for the scenario to mean
/// anything (e.g. the honest registration an attack later abuses).
fn step<T, E: fmt::Debug>(what: &str, r: Result<T, E>) -> Result<T, ScriptError> {
    r.map_err(|e| ScriptError(format!("{what}: {e:?}")))
}

/// Where the decisive refusal surfaced.
#[derive(Clone, Debug)]
pub struct Detection {
    /// Index into the report's concatenated transcript.
    pub step: usize,
    /// What that entry shows.
    pub what: String,
}

/// Everything one run produced.
pub struct Report {
    pub name: String,
    pub expected: Outcome,
    /// `None` when the script itself broke (see `script_error`).
    pub observed: Option<Outcome>,
    pub script_error: Option<String>,
    pub detection: Option<Detection>,
    /// All frames from all worlds the scenario drove, in delivery order.
    pub entries: Vec<TranscriptEntry>,
    /// Register-change history, rendered one line per event.
    pub pcr_history: Vec<String>,
    pub leaks: Vec<Finding>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.script_error.is_none()
            && self.observed == Some(self.expected)
            && self.leaks.is_empty()
    }
}

// ---------------------------------------------------------------------------
// The script context

/// State a running script accumulates: the worlds it installed, the notes
/// it took, and where it saw the decisive refusal.
pub struct Ctx {
    pub seed: u64,
    dirs: Vec<tempfile::TempDir>,
    sims: Vec<Sim>,
    notes: Vec<String>,
    detection: Option<(usize, usize, String)>,
}

impl Ctx {
    fn new(seed: u64) -> Ctx {
        Ctx { seed, dirs: Vec::new(), sims: Vec::new(), notes: Vec::new(), detection: None }
    }

    /// Install a fresh world in its own directory; `tag` separates the
    /// random streams of multiple worlds in one scenario. Not booted.
    fn install(&mut self, tag: &str) -> Result<usize, ScriptError> {
        let dir = step("create world directory", tempfile::tempdir())?;
        let world_seed = sub_rng(self.seed, tag).next_u64();
        self.sims.push(Sim::new(World::install(world_seed, dir.path())));
        self.dirs.push(dir);
        Ok(self.sims.len() - 1)
    }

    fn sim(&self, idx: usize) -> &Sim {
        &self.sims[idx]
    }

    fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Record the last frame of world `idx` as the decisive one.
    fn detect_here(&mut self, idx: usize, what: impl Into<String>) {
        let entry = self.sims[idx].transcript_len().saturating_sub(1);
        self.detection = Some((idx, entry, what.into()));
    }
}

// ---------------------------------------------------------------------------
// Result classification

/// Map a refusal code to the outcome it evidences. Context-free; scripts
/// override where a code means something more specific in context (a
/// refused one-time password after its first use is a replay rejection).
fn outcome_of_code(code: &str) -> Outcome {
    match code {
        codes::REPLAY => Outcome::ReplayRejected,
        codes::SEAL_VIOLATION | codes::KEY_PROVENANCE => Outcome::SealViolation,
        codes::ATTESTATION => Outcome::AttestationFailure,
        codes::CERTIFICATE_REFUSED => Outcome::CertificateRefused,
        codes::BLOB_INTEGRITY | codes::UNKNOWN_BLOB => Outcome::CredentialAccessBlocked,
        _ => Outcome::TunnelRefused,
    }
}

fn outcome_of_client_err(e: &ClientError) -> Outcome {
    match e {
        ClientError::QuoteRejected(QuoteRejection::StaleNonce { .. }) => Outcome::ReplayRejected,
        ClientError::QuoteRejected(_) | ClientError::Attestation(_) => {
            Outcome::AttestationFailure
        }
        ClientError::Refused { code, .. } => outcome_of_code(code),
        _ => Outcome::TunnelRefused,
    }
}

fn classify<T>(r: &Result<T, ClientError>) -> Outcome {
    match r {
        Ok(_) => Outcome::FlowSucceeds,
        Err(e) => outcome_of_client_err(e),
    }
}

// ---------------------------------------------------------------------------
// The catalog

type ScriptFn = fn(&mut Ctx) -> Result<Outcome, ScriptError>;

pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub expected: Outcome,
    /// False for the honest baseline and the concurrency stress.
    pub attack: bool,
    run: ScriptFn,
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "honest-end-to-end",
            summary: "register, authenticate with master then one-time password, \
                      enroll at two sites, submit, update, submit again",
            expected: Outcome::FlowSucceeds,
            attack: false,
            run: s_honest_end_to_end,
        },
        Scenario {
            name: "tamper-proxy-pre-boot",
            summary: "host module image trojaned before startup; measurement refuses boot",
            expected: Outcome::DetectedAtBoot,
            attack: true,
            run: s_tamper_proxy_pre_boot,
        },
        Scenario {
            name: "tamper-proxy-post-boot",
            summary: "host module image infected while running; client attestation catches it",
            expected: Outcome::AttestationFailure,
            attack: true,
            run: s_tamper_proxy_post_boot,
        },
        Scenario {
            name: "tamper-flicker-pre-boot",
            summary: "invocation layer trojaned before startup; measurement refuses boot",
            expected: Outcome::DetectedAtBoot,
            attack: true,
            run: s_tamper_flicker_pre_boot,
        },
        Scenario {
            name: "tamper-flicker-post-boot",
            summary: "invocation layer swapped at runtime; the trust chain breaks and \
                      sealed state refuses to open",
            expected: Outcome::SealViolation,
            attack: true,
            run: s_tamper_flicker_post_boot,
        },
        Scenario {
            name: "tamper-pal",
            summary: "kernel image modified; the launch register chains to a different \
                      value and the client rejects it",
            expected: Outcome::AttestationFailure,
            attack: true,
            run: s_tamper_pal,
        },
        Scenario {
            name: "forge-pcr15",
            summary: "a rogue module extends the key register and asks the kernel to seal \
                      its own key; the one-extend provenance proof fails",
            expected: Outcome::SealViolation,
            attack: true,
            run: s_forge_pcr15,
        },
        Scenario {
            name: "mutate-pal-input",
            summary: "kernel input corrupted in the exchange window; denial of service \
                      only, nothing disclosed",
            expected: Outcome::TunnelRefused,
            attack: true,
            run: s_mutate_pal_input,
        },
        Scenario {
            name: "mutate-pal-output",
            summary: "kernel output (the offered tunnel key) rewritten by the host; the \
                      attested log disowns it",
            expected: Outcome::AttestationFailure,
            attack: true,
            run: s_mutate_pal_output,
        },
        Scenario {
            name: "replay-auth-quote",
            summary: "a captured attestation response is served for a fresh challenge; \
                      the stale nonce gives it away",
            expected: Outcome::ReplayRejected,
            attack: true,
            run: s_replay_auth_quote,
        },
        Scenario {
            name: "replay-encrypted-credentials",
            summary: "recorded registration, login, and enrollment ciphertexts are \
                      re-injected; every one is refused",
            expected: Outcome::ReplayRejected,
            attack: true,
            run: s_replay_encrypted_credentials,
        },
        Scenario {
            name: "forge-target-certificate",
            summary: "an impostor site presents a certificate from the wrong authority; \
                      the visit dies before any credential moves",
            expected: Outcome::CertificateRefused,
            attack: true,
            run: s_forge_target_certificate,
        },
        Scenario {
            name: "otp-from-untrusted-client",
            summary: "login from a keylogged kiosk with a one-time password; the captured \
                      password is worthless afterwards",
            expected: Outcome::ReplayRejected,
            attack: true,
            run: s_otp_from_untrusted_client,
        },
        Scenario {
            name: "malicious-copy-of-proxy",
            summary: "the credential store is copied and driven by a rogue host; sealed \
                      blobs stay shut elsewhere and kernel output stays ciphertext here",
            expected: Outcome::CredentialAccessBlocked,
            attack: true,
            run: s_malicious_copy_of_proxy,
        },
        Scenario {
            name: "concurrent-clients",
            summary: "two clients interleave sessions; the single kernel gate signals \
                      busy, evicts stale handshakes, and keeps sessions apart",
            expected: Outcome::FlowSucceeds,
            attack: false,
            run: s_concurrent_clients,
        },
    ]
}

pub fn find_scenario(name: &str) -> Option<Scenario> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

// ---------------------------------------------------------------------------
// The runner

/// Per-scenario seed: independent worlds per scenario, stable per (seed,
/// name) pair.
fn scenario_seed(seed: u64, name: &str) -> u64 {
    sub_rng(seed, &format!("scenario:{name}")).next_u64()
}

pub fn run_scenario(scenario: &Scenario, seed: u64) -> Report {
    let mut ctx = Ctx::new(scenario_seed(seed, scenario.name));
    let result = (scenario.run)(&mut ctx);

    let mut entries = Vec::new();
    let mut offsets = Vec::new();
    let mut leaks = Vec::new();
    let mut pcr_history = Vec::new();
    for (idx, sim) in ctx.sims.iter().enumerate() {
        offsets.push(entries.len());
        entries.extend(sim.transcript());
        leaks.extend(leak::scan_sim(sim));
        for event in sim.world.proxy.tpm().lock().pcr_history() {
            pcr_history.push(format!(
                "w{idx} pcr{:02} {} = {}",
                event.pcr_index,
                event.label,
                event.value.to_hex()
            ));
        }
    }
    let detection = ctx.detection.map(|(sim_idx, entry_idx, what)| Detection {
        step: offsets[sim_idx] + entry_idx,
        what,
    });

    let (observed, script_error) = match result {
        Ok(outcome) => (Some(outcome), None),
        Err(ScriptError(e)) => (None, Some(e)),
    };
    Report {
        name: scenario.name.to_string(),
        expected: scenario.expected,
        observed,
        script_error,
        detection,
        entries,
        pcr_history,
        leaks,
        notes: ctx.notes,
    }
}

pub fn run_all(seed: u64) -> Vec<Report> {
    builtin_scenarios().iter().map(|s| run_scenario(s, seed)).collect()
}

// ---------------------------------------------------------------------------
// Script building blocks

/// Install one world and boot it; the baseline opening move.
fn booted_world(ctx: &mut Ctx) -> Result<usize, ScriptError> {
    let idx = ctx.install("main")?;
    step("boot the proxy", ctx.sim(idx).world.proxy.boot())?;
    Ok(idx)
}

/// Register the standing user from the workstation and log in with the
/// master password; returns (client, session).
fn register_and_login(sim: &Sim) -> Result<(Client, u64), ScriptError> {
    let mut client = sim.world.client("alice-workstation");
    let mut ch = sim.channel(CLIENT_ADDR);
    step("establish registration tunnel", client.establish_tunnel(&mut ch))?;
    step("register", client.register(&mut ch, MASTER_PASSWORD, SECRET_PHRASE))?;
    step("establish login tunnel", client.establish_tunnel(&mut ch))?;
    let session = step("log in", client.login_master(&mut ch, MASTER_PASSWORD))?;
    Ok((client, session))
}

/// Visit a site's login page and enroll its real credentials.
fn enroll_site(
    sim: &Sim,
    client: &mut Client,
    session: u64,
    site: &str,
    password: &str,
) -> Result<(), ScriptError> {
    let mut ch = sim.channel(CLIENT_ADDR);
    let (token, _) = step("visit login page", client.visit(&mut ch, session, site, "login"))?;
    let (ok, detail) = step(
        "enroll credentials",
        client.enroll(&mut ch, session, token, &[("username", USER_ID), ("password", password)]),
    )?;
    if !ok {
        return Err(ScriptError(format!("enrollment refused: {detail}")));
    }
    Ok(())
}

fn field<'a>(fields: &'a [(String, String)], name: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

// ---------------------------------------------------------------------------
// Scenario scripts

fn s_honest_end_to_end(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    let mut ch = sim.channel(CLIENT_ADDR);

    // Registration, then both authentication paths: the master password
    // proves the long-term secret works, the one-time password proves the
    // chain registered alongside it works.
    step("establish registration tunnel", client.establish_tunnel(&mut ch))?;
    let params = step("register", client.register(&mut ch, MASTER_PASSWORD, SECRET_PHRASE))?;
    step("parse password-list parameters", OtpParams::from_line(&params))?;
    step("establish first login tunnel", client.establish_tunnel(&mut ch))?;
    step("log in with master password", client.login_master(&mut ch, MASTER_PASSWORD))?;
    step("establish second login tunnel", client.establish_tunnel(&mut ch))?;
    let session = step("log in with one-time password", client.login_otp(&mut ch, SECRET_PHRASE))?;

    // First encounter with each site: the login page renders empty
    // credential fields and the user enrolls the real values.
    for (site, password) in [(SITE_BANK, BANK_PASSWORD), (SITE_MAIL, MAIL_PASSWORD)] {
        let (token, fields) =
            step("visit login page", client.visit(&mut ch, session, site, "login"))?;
        if field(&fields, "password") != Some("") {
            return Err(ScriptError("fresh login page should render empty fields".into()));
        }
        let (ok, detail) = step(
            "enroll credentials",
            client.enroll(
                &mut ch,
                session,
                token,
                &[("username", USER_ID), ("password", password)],
            ),
        )?;
        if !ok {
            return Err(ScriptError(format!("enrollment refused: {detail}")));
        }
    }

    // Second encounter: the page comes back filled with dummies — never
    // the real value — and submitting logs in at the site.
    for (site, password) in [(SITE_BANK, BANK_PASSWORD), (SITE_MAIL, MAIL_PASSWORD)] {
        let (token, fields) =
            step("revisit login page", client.visit(&mut ch, session, site, "login"))?;
        let rendered = field(&fields, "password").unwrap_or_default();
        if rendered.is_empty() || rendered == password {
            return Err(ScriptError(
                "enrolled login page must render a dummy, not the real value".into(),
            ));
        }
        let (ok, detail) = step("submit login", client.submit(&mut ch, session, token))?;
        if !ok {
            return Err(ScriptError(format!("site refused the login: {detail}")));
        }
    }

    // Rotate the first site's password and log in with the rotation.
    let (token, _) =
        step("visit update page", client.visit(&mut ch, session, SITE_BANK, "update"))?;
    let (ok, detail) = step(
        "update credentials",
        client.update(&mut ch, session, token, &[("new_password", BANK_PASSWORD_ROTATED)]),
    )?;
    if !ok {
        return Err(ScriptError(format!("site refused the update: {detail}")));
    }
    let (token, _) =
        step("revisit login page", client.visit(&mut ch, session, SITE_BANK, "login"))?;
    let (ok, detail) = step("submit rotated login", client.submit(&mut ch, session, token))?;
    if !ok {
        return Err(ScriptError(format!("rotated login refused: {detail}")));
    }

    // Final state: the site really holds the rotated password, and the
    // store holds exactly the two enrolled records.
    let bank_now = ctx.sim(idx).world.sites[SITE_BANK].password_of(USER_ID);
    if bank_now.as_deref() != Some(BANK_PASSWORD_ROTATED) {
        return Err(ScriptError("site account should hold the rotated password".into()));
    }
    let db = step(
        "reopen the credential store",
        Database::open(&ctx.sim(idx).world.root.join("proxy.db")),
    )?;
    for site in [SITE_BANK, SITE_MAIL] {
        if db.credential(USER_ID, site).is_none() {
            return Err(ScriptError(format!("store is missing the {site} record")));
        }
    }
    ctx.note("both sites accepted injected logins; update rotated the stored record");
    Ok(Outcome::FlowSucceeds)
}

fn tamper_file(root: &Path, name: &str, original: &[u8]) -> Result<(), ScriptError> {
    let mut bytes = original.to_vec();
    bytes.extend_from_slice(b"#trojan payload\n");
    step("tamper artifact", fs::write(root.join(name), bytes))
}

fn s_tamper_proxy_pre_boot(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = ctx.install("main")?;
    tamper_file(&ctx.sim(idx).world.root, "pm.img", PROXY_IMAGE)?;
    let boot = ctx.sim(idx).world.proxy.boot();
    let outcome = match boot {
        Err(BootError::ModuleMismatch { module, .. }) if module == "proxy" => {
            ctx.note("startup measurement refused the modified host module");
            Outcome::DetectedAtBoot
        }
        other => {
            ctx.note(format!("boot unexpectedly returned {other:?}"));
            return Ok(Outcome::FlowSucceeds);
        }
    };
    // The service never comes up: the first client contact is turned away.
    let reply = ctx.sim(idx).client_request(CLIENT_ADDR, Frame::TunnelRequest);
    if !matches!(&reply, Frame::Error { .. }) {
        return Err(ScriptError(format!("unbooted proxy served a tunnel: {reply:?}")));
    }
    ctx.detect_here(idx, "service refused: detection happened before any frame crossed");
    Ok(outcome)
}

fn s_tamper_flicker_pre_boot(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = ctx.install("main")?;
    tamper_file(&ctx.sim(idx).world.root, "flicker.img", FLICKER_IMAGE)?;
    match ctx.sim(idx).world.proxy.boot() {
        Err(BootError::ModuleMismatch { module, .. }) if module == "flicker" => {
            ctx.note("startup measurement refused the modified invocation layer");
        }
        other => {
            ctx.note(format!("boot unexpectedly returned {other:?}"));
            return Ok(Outcome::FlowSucceeds);
        }
    }
    let reply = ctx.sim(idx).client_request(CLIENT_ADDR, Frame::TunnelRequest);
    if !matches!(&reply, Frame::Error { .. }) {
        return Err(ScriptError(format!("unbooted proxy served a tunnel: {reply:?}")));
    }
    ctx.detect_here(idx, "service refused: detection happened before any frame crossed");
    Ok(Outcome::DetectedAtBoot)
}

fn s_tamper_proxy_post_boot(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    tamper_file(&ctx.sim(idx).world.root, "pm.img", PROXY_IMAGE)?;

    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    let result = client.establish_tunnel(&mut sim.channel(CLIENT_ADDR));
    let observed = classify(&result);
    ctx.detect_here(idx, "attestation evidence names the infected module digest");

    // Nothing sensitive was conveyed: the client refuses to encrypt
    // without an attested key, so no registration frame ever forms.
    let before = ctx.sim(idx).transcript_len();
    let refused = ctx
        .sim(idx)
        .world
        .client("alice-second-try")
        .register(&mut ctx.sim(idx).channel(CLIENT_ADDR), MASTER_PASSWORD, SECRET_PHRASE);
    if !matches!(refused, Err(ClientError::NoTunnel)) {
        return Err(ScriptError(format!("client encrypted without a tunnel: {refused:?}")));
    }
    if ctx.sim(idx).transcript_len() != before {
        return Err(ScriptError("refusal must happen before anything crosses".into()));
    }
    ctx.note("client-side refusal kept the master password off the wire entirely");
    Ok(observed)
}

fn s_tamper_flicker_post_boot(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let (mut client, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut client, session, SITE_BANK, BANK_PASSWORD)?;
    let submissions_before = ctx.sim(idx).world.sites[SITE_BANK].submissions().len();

    tamper_file(&ctx.sim(idx).world.root, "flicker.img", FLICKER_IMAGE)?;

    // The session is still live and the page renders, but the submit needs
    // the kernel to open sealed state measured under the old chain.
    let sim = ctx.sim(idx);
    let mut ch = sim.channel(CLIENT_ADDR);
    let (token, _) =
        step("revisit login page", client.visit(&mut ch, session, SITE_BANK, "login"))?;
    let result = client.submit(&mut ch, session, token);
    let observed = classify(&result);
    ctx.detect_here(idx, "unseal refused under the broken trust chain");

    if ctx.sim(idx).world.sites[SITE_BANK].submissions().len() != submissions_before {
        return Err(ScriptError("no submission may reach the site after the swap".into()));
    }
    ctx.note("stored record survived but stayed sealed; nothing reached the site");
    Ok(observed)
}

fn s_tamper_pal(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    tamper_file(&ctx.sim(idx).world.root, "pal.img", PAL_IMAGE)?;

    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    let result = client.establish_tunnel(&mut sim.channel(CLIENT_ADDR));
    // The evidence itself is well-formed — the emulator honestly measured
    // the modified kernel — but it chains to a different launch-register
    // value than the one the client trusts.
    match &result {
        Err(ClientError::Attestation(detail)) if detail.contains("does not chain") => {}
        other => return Err(ScriptError(format!("expected a log mismatch, got {other:?}"))),
    }
    ctx.detect_here(idx, "launch register chains over the modified kernel digest");
    Ok(classify(&result))
}

fn s_forge_pcr15(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;

    // A malicious module mints its own keypair, extends the key register
    // with its hash, and asks the kernel to seal it — hoping credential
    // output will henceforth be addressed to a key it holds.
    let mut rogue_rng = sub_rng(ctx.seed, "rogue-module");
    let rogue = generate_keypair(KeyPurpose::Proxy, &mut rogue_rng);
    let rogue_pub = rogue.public.canonical_bytes();
    step(
        "extend the key register with the rogue hash",
        ctx.sim(idx).world.proxy.tpm().lock().extend(
            PCR_PROXY_KEY,
            "rogue:key",
            &hash(&rogue_pub),
        ),
    )?;
    let request = PalEnvelope::new(PalOption::InitialSealing).with_field("pm_pub", rogue_pub);
    let reply = step(
        "request sealing of the rogue key",
        ctx.sim(idx).world.proxy.flicker().invoke(&request),
    )?;
    if reply.option != PalOption::Error {
        ctx.note("kernel sealed a rogue key");
        return Ok(Outcome::FlowSucceeds);
    }
    let code = reply.field("code").and_then(|c| c.first().copied()).unwrap_or(0);
    if PalError::code_name(code) != "key-provenance" {
        return Err(ScriptError(format!(
            "expected the provenance refusal, got {}",
            PalError::code_name(code)
        )));
    }

    // Registers only ever extend — the one-extend history the proof needs
    // cannot be faked. And the genuine sealed key, bound to the launch
    // register, keeps serving: the whole flow still works.
    let (mut client, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut client, session, SITE_BANK, BANK_PASSWORD)?;
    let sim = ctx.sim(idx);
    let mut ch = sim.channel(CLIENT_ADDR);
    let (token, _) =
        step("revisit login page", client.visit(&mut ch, session, SITE_BANK, "login"))?;
    let (ok, detail) = step("submit still works", client.submit(&mut ch, session, token))?;
    if !ok {
        return Err(ScriptError(format!("honest submit broke: {detail}")));
    }
    ctx.detection = Some((
        idx,
        0,
        "rogue sealing refused inside the kernel before the first frame crossed".into(),
    ));
    ctx.note("nothing was ever encrypted to the rogue key; honest service is unharmed");
    Ok(Outcome::SealViolation)
}

fn s_mutate_pal_input(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    let mut ch = sim.channel(CLIENT_ADDR);
    step("establish registration tunnel", client.establish_tunnel(&mut ch))?;
    step("register", client.register(&mut ch, MASTER_PASSWORD, SECRET_PHRASE))?;
    step("establish login tunnel", client.establish_tunnel(&mut ch))?;

    // The compromised host flips one byte of the encrypted payload as it
    // sits in the kernel exchange window.
    sim.world.proxy.flicker().set_input_tamper(Some(Box::new(|bytes| {
        if let Ok(env) = PalEnvelope::decode(bytes) {
            if env.option == PalOption::Authentication {
                if let Some(payload) = env.field("enc_payload") {
                    let mut payload = payload.to_vec();
                    payload[0] ^= 0x01;
                    *bytes = env.with_field("enc_payload", payload).encode();
                }
            }
        }
    })));
    let result = client.login_master(&mut ch, MASTER_PASSWORD);
    let observed = match &result {
        Err(e @ ClientError::Refused { .. }) => {
            ctx.detect_here(idx, "kernel could not open the mutated payload; login refused");
            outcome_of_client_err(e)
        }
        other => return Err(ScriptError(format!("mutated input was accepted: {other:?}"))),
    };

    // Denial of service only: stop mutating and the same user gets in.
    ctx.sim(idx).world.proxy.flicker().set_input_tamper(None);
    let sim = ctx.sim(idx);
    let mut ch = sim.channel(CLIENT_ADDR);
    step("re-establish tunnel", client.establish_tunnel(&mut ch))?;
    step("recovered login", client.login_master(&mut ch, MASTER_PASSWORD))?;
    ctx.note("service recovered the moment the mutation stopped; no secret was disclosed");
    Ok(observed)
}

fn s_mutate_pal_output(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;

    // The host rewrites the kernel's output in the exchange window,
    // substituting a byte of the freshly minted tunnel key.
    ctx.sim(idx).world.proxy.flicker().set_output_tamper(Some(Box::new(|bytes| {
        if let Ok(env) = PalEnvelope::decode(bytes) {
            if env.option == PalOption::SecureTunnel {
                if let Some(key) = env.field("pal_pub") {
                    let mut key = key.to_vec();
                    let last = key.len() - 1;
                    key[last] ^= 0x01;
                    *bytes = env.with_field("pal_pub", key).encode();
                }
            }
        }
    })));

    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    let result = client.establish_tunnel(&mut sim.channel(CLIENT_ADDR));
    match &result {
        Err(ClientError::Attestation(_)) => {}
        other => return Err(ScriptError(format!("substituted key was accepted: {other:?}"))),
    }
    ctx.detect_here(
        idx,
        "quoted log binds the genuine key; the delivered key fails that binding",
    );
    let observed = classify(&result);

    ctx.sim(idx).world.proxy.flicker().set_output_tamper(None);
    let sim = ctx.sim(idx);
    step("recovery tunnel", sim.world.client("alice-retry").establish_tunnel(&mut sim.channel(CLIENT_ADDR)))?;
    ctx.note("with the rewrite gone the next tunnel attests cleanly");
    Ok(observed)
}

fn s_replay_auth_quote(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let sim = ctx.sim(idx);
    let mut client = sim.world.client("alice-workstation");
    step("baseline tunnel", client.establish_tunnel(&mut sim.channel(CLIENT_ADDR)))?;

    // Capture the attestation response of the baseline handshake.
    let captured = sim
        .transcript()
        .into_iter()
        .find(|e| e.frame.kind() == "attest-response")
        .map(|e| e.frame);
    let Some(Frame::AttestResponse { quote, sml, .. }) = captured else {
        return Err(ScriptError("baseline handshake produced no attestation response".into()));
    };

    // An on-path attacker answers the next challenge with the captured
    // evidence, rewriting the plaintext tunnel id to match.
    sim.set_response_tap(Some(Box::new(move |req, reply| {
        if let Frame::AttestChallenge { tunnel_id, .. } = req {
            *reply = Frame::AttestResponse {
                tunnel_id: *tunnel_id,
                quote: quote.clone(),
                sml: sml.clone(),
            };
        }
    })));
    let result = client.establish_tunnel(&mut sim.channel(CLIENT_ADDR));
    match &result {
        Err(ClientError::QuoteRejected(QuoteRejection::StaleNonce { .. })) => {}
        other => return Err(ScriptError(format!("replayed quote was not flagged: {other:?}"))),
    }
    ctx.detect_here(idx, "quote answers an old challenge, not this one");
    let observed = classify(&result);
    ctx.sim(idx).set_response_tap(None);
    Ok(observed)
}

fn s_replay_encrypted_credentials(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let (mut client, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut client, session, SITE_BANK, BANK_PASSWORD)?;

    // Every credential-bearing client frame from the honest run.
    let captured: Vec<Frame> = ctx
        .sim(idx)
        .transcript()
        .into_iter()
        .filter(|e| {
            matches!(
                e.frame,
                Frame::RegisterRequest { .. }
                    | Frame::LoginRequest { .. }
                    | Frame::EnrollRequest { .. }
            )
        })
        .map(|e| e.frame)
        .collect();
    if captured.len() != 3 {
        return Err(ScriptError(format!(
            "expected 3 captured credential frames, found {}",
            captured.len()
        )));
    }

    // Re-inject each one on the same wire it was recorded from. The
    // ciphertexts are valid; the single-use state behind them is gone.
    let mut first_detection = None;
    for frame in captured {
        let kind = frame.kind();
        let reply = ctx.sim(idx).client_request(CLIENT_ADDR, frame);
        match reply {
            Frame::Error { code, .. } if code == codes::REPLAY => {
                if first_detection.is_none() {
                    first_detection = Some(ctx.sim(idx).transcript_len() - 1);
                }
            }
            other => {
                return Err(ScriptError(format!("replayed {kind} was not refused: {other:?}")))
            }
        }
    }
    if let Some(entry) = first_detection {
        ctx.detection = Some((idx, entry, "first replayed ciphertext refused".into()));
    }
    ctx.note("registration, login, and enrollment replays all refused as already used");
    Ok(Outcome::ReplayRejected)
}

fn s_forge_target_certificate(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let (mut client, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut client, session, SITE_BANK, BANK_PASSWORD)?;
    let submissions_before = ctx.sim(idx).world.sites[SITE_BANK].submissions().len();

    // An impostor now fronts the site with a certificate from an authority
    // nobody here trusts.
    let rogue = generate_keypair(KeyPurpose::Ek, &mut sub_rng(ctx.seed, "rogue-ca"));
    ctx.sim(idx).world.sites[SITE_BANK].forge_certificate(&rogue);

    let sim = ctx.sim(idx);
    let mut ch = sim.channel(CLIENT_ADDR);
    let result = client.visit(&mut ch, session, SITE_BANK, "login");
    let observed = classify(&result);
    ctx.detect_here(idx, "certificate rejected before any page rendered");

    if ctx.sim(idx).world.sites[SITE_BANK].submissions().len() != submissions_before {
        return Err(ScriptError("nothing may be submitted to an unverified site".into()));
    }
    // Only that visit dies; the session and other sites are unaffected.
    let sim = ctx.sim(idx);
    let mut ch = sim.channel(CLIENT_ADDR);
    step("unrelated site still reachable", client.visit(&mut ch, session, SITE_MAIL, "login"))?;
    ctx.note("the failed visit ended only itself; the session carried on at another site");
    Ok(observed)
}

fn s_otp_from_untrusted_client(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;

    // At home: register, log in, and enroll the bank so the kiosk session
    // will never need the bank password at all.
    let (mut home, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut home, session, SITE_BANK, BANK_PASSWORD)?;
    let params = step(
        "recover the password-list parameters",
        home.profile.otp_params.clone().ok_or("registration kept no parameters"),
    )?;
    let chain = step(
        "derive the printed password list",
        otp::derive_chain(SECRET_PHRASE, &OtpParams::from_line(&params).map_err(|e| ScriptError(e.to_string()))?),
    )?;

    // At the kiosk: the user types only one-time password number one. A
    // keylogger on the kiosk captures exactly that value.
    let sim = ctx.sim(idx);
    let mut kiosk = sim.world.client("alice-kiosk");
    let mut kiosk_ch = sim.channel(KIOSK_ADDR);
    let typed_at_kiosk = chain[0].to_hex();
    step("kiosk tunnel", kiosk.establish_tunnel(&mut kiosk_ch))?;
    let kiosk_session =
        step("kiosk login", kiosk.login_with(&mut kiosk_ch, "otp", &typed_at_kiosk))?;
    let (token, _) = step(
        "kiosk visits the bank",
        kiosk.visit(&mut kiosk_ch, kiosk_session, SITE_BANK, "login"),
    )?;
    let (ok, detail) =
        step("kiosk submits the login", kiosk.submit(&mut kiosk_ch, kiosk_session, token))?;
    if !ok {
        return Err(ScriptError(format!("kiosk login refused: {detail}")));
    }
    ctx.note("kiosk session reached the bank without the bank password ever being typed");

    // The attacker spends the captured password. It hashed to the old
    // list head; the head has moved on.
    let sim = ctx.sim(idx);
    let mut attacker = sim.world.client("attacker");
    let mut attacker_ch = sim.channel(ATTACKER_ADDR);
    step("attacker tunnel", attacker.establish_tunnel(&mut attacker_ch))?;
    let result = attacker.login_with(&mut attacker_ch, "otp", &typed_at_kiosk);
    let observed = match &result {
        Err(ClientError::Refused { code, .. }) if code == codes::AUTH_REFUSED => {
            ctx.detect_here(idx, "captured one-time password refused as already spent");
            Outcome::ReplayRejected
        }
        other => return Err(ScriptError(format!("captured password was honored: {other:?}"))),
    };

    // The user's next listed password still works from home.
    let sim = ctx.sim(idx);
    let mut home_ch = sim.channel(CLIENT_ADDR);
    step("home tunnel", home.establish_tunnel(&mut home_ch))?;
    step(
        "next listed password logs in",
        home.login_with(&mut home_ch, "otp", &chain[1].to_hex()),
    )?;
    ctx.note("the list advanced cleanly: element two still logs the user in");
    Ok(observed)
}

fn s_malicious_copy_of_proxy(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let (mut client, session) = register_and_login(ctx.sim(idx))?;
    enroll_site(ctx.sim(idx), &mut client, session, SITE_BANK, BANK_PASSWORD)?;

    // Facet one: a rogue process on the same platform drives the kernel
    // with the stored record. The kernel serves it — and addresses the
    // output to the sealed host key, which the rogue does not hold.
    let mut attacker_rng = sub_rng(ctx.seed, "rogue-process");
    let (enc_cred_pm_len, reply_bytes) = {
        let sim = ctx.sim(idx);
        let db = step("read the store", Database::open(&sim.world.root.join("proxy.db")))?;
        let record = db
            .credential(USER_ID, SITE_BANK)
            .ok_or_else(|| ScriptError("store is missing the enrolled record".into()))?;
        let sealed_pm = db
            .sealed_pm_pub()
            .ok_or_else(|| ScriptError("store is missing the sealed host key".into()))?;
        let request = PalEnvelope::new(PalOption::CredentialDecryption)
            .with_field("enc_cred", record.enc_cred.clone())
            .with_field("nonce", record.nonce.as_bytes().to_vec())
            .with_field("nonce_prime", Nonce::generate(&mut attacker_rng).as_bytes().to_vec())
            .with_field("sealed_pal_priv", record.sealed_pal_priv.encode())
            .with_field("sealed_pm_pub", sealed_pm.encode());
        let reply = step("drive the kernel directly", sim.world.proxy.flicker().invoke(&request))?;
        if reply.option != PalOption::CredentialDecryption {
            return Err(ScriptError(format!("kernel refused the rogue request: {reply:?}")));
        }
        let out = reply
            .field("enc_cred_pm")
            .ok_or_else(|| ScriptError("kernel reply carried no output".into()))?;
        (out.len(), reply.encode())
    };
    let window = |bytes: &[u8], needle: &[u8]| {
        bytes.windows(needle.len()).any(|w| w == needle)
    };
    if window(&reply_bytes, BANK_PASSWORD.as_bytes()) {
        return Err(ScriptError("kernel output leaked the stored credential".into()));
    }
    if enc_cred_pm_len == 0 {
        return Err(ScriptError("kernel output is empty".into()));
    }
    ctx.note(
        "same-platform rogue got only ciphertext addressed to the sealed host key it lacks",
    );

    // Facet two: the whole store is copied to another machine. That
    // machine's chip never sealed these blobs; they stay shut.
    let clone_idx = {
        let src = ctx.sim(idx).world.root.join("proxy.db");
        let clone_idx = ctx.install("clone-machine")?;
        step(
            "plant the stolen store",
            fs::copy(&src, ctx.sim(clone_idx).world.root.join("proxy.db")).map(|_| ()),
        )?;
        // Reassemble over the stolen file so the clone's proxy serves it.
        clone_idx
    };
    // The clone re-reads the planted store on boot.
    let clone_seed = ctx.sim(clone_idx).world.seed;
    let clone_root = ctx.sim(clone_idx).world.root.clone();
    let resumed = step("restart the clone over the stolen store", World::resume(clone_seed, &clone_root, 1))?;
    ctx.sims[clone_idx] = Sim::new(resumed);
    step("boot the clone", ctx.sim(clone_idx).world.proxy.boot())?;

    // The clone is genuine hardware running genuine images, so a tunnel
    // attests — but the stolen password list cannot be opened there, so
    // no login can even be evaluated.
    let sim = ctx.sim(clone_idx);
    let mut lured = sim.world.client("lured-user");
    let mut ch = sim.channel(ATTACKER_ADDR);
    step("clone tunnel attests (genuine platform)", lured.establish_tunnel(&mut ch))?;
    let result = lured.login_master(&mut ch, MASTER_PASSWORD);
    let observed = match &result {
        Err(ClientError::Refused { code, .. })
            if code == codes::BLOB_INTEGRITY
                || code == codes::SEAL_VIOLATION
                || code == codes::UNKNOWN_BLOB =>
        {
            ctx.detect_here(clone_idx, "stolen password list refused by the clone's chip");
            Outcome::CredentialAccessBlocked
        }
        other => return Err(ScriptError(format!("clone evaluated a login: {other:?}"))),
    };

    // And the stolen enrolled record is equally dead on the clone.
    let sim = ctx.sim(clone_idx);
    let clone_db = step("read the planted store", Database::open(&sim.world.root.join("proxy.db")))?;
    let record = clone_db
        .credential(USER_ID, SITE_BANK)
        .ok_or_else(|| ScriptError("planted store lost the record".into()))?;
    let request = PalEnvelope::new(PalOption::CredentialDecryption)
        .with_field("enc_cred", record.enc_cred.clone())
        .with_field("nonce", record.nonce.as_bytes().to_vec())
        .with_field("nonce_prime", Nonce::generate(&mut attacker_rng).as_bytes().to_vec())
        .with_field("sealed_pal_priv", record.sealed_pal_priv.encode())
        .with_field(
            "sealed_pm_pub",
            clone_db
                .sealed_pm_pub()
                .ok_or_else(|| ScriptError("clone store has no sealed host key".into()))?
                .encode(),
        );
    let reply = step("drive the clone's kernel", sim.world.proxy.flicker().invoke(&request))?;
    if reply.option != PalOption::Error {
        return Err(ScriptError("clone's kernel opened a foreign blob".into()));
    }
    ctx.note("every path to the plaintext ends at a chip that never sealed these blobs");
    Ok(observed)
}

fn s_concurrent_clients(ctx: &mut Ctx) -> Result<Outcome, ScriptError> {
    let idx = booted_world(ctx)?;
    let sim = ctx.sim(idx);

    // Two full drivers on different endpoints, one registered user.
    let mut a = sim.world.client("alice-workstation");
    let mut b = sim.world.client("alice-kiosk");
    let mut ch_a = sim.channel(CLIENT_ADDR);
    let mut ch_b = sim.channel(KIOSK_ADDR);

    step("a: registration tunnel", a.establish_tunnel(&mut ch_a))?;
    step("a: register", a.register(&mut ch_a, MASTER_PASSWORD, SECRET_PHRASE))?;
    step("a: login tunnel", a.establish_tunnel(&mut ch_a))?;
    step("b: login tunnel", b.establish_tunnel(&mut ch_b))?;
    let session_a = step("a: login", a.login_master(&mut ch_a, MASTER_PASSWORD))?;
    let session_b = step("b: login", b.login_master(&mut ch_b, MASTER_PASSWORD))?;

    // Interleaved site work on both sessions.
    let (token_a, _) = step("a: visit", a.visit(&mut ch_a, session_a, SITE_BANK, "login"))?;
    let (token_b, _) = step("b: visit", b.visit(&mut ch_b, session_b, SITE_MAIL, "login"))?;
    let (ok, detail) = step(
        "a: enroll",
        a.enroll(&mut ch_a, session_a, token_a, &[("username", USER_ID), ("password", BANK_PASSWORD)]),
    )?;
    if !ok {
        return Err(ScriptError(format!("a's enrollment refused: {detail}")));
    }
    let (ok, detail) = step(
        "b: enroll",
        b.enroll(&mut ch_b, session_b, token_b, &[("username", USER_ID), ("password", MAIL_PASSWORD)]),
    )?;
    if !ok {
        return Err(ScriptError(format!("b's enrollment refused: {detail}")));
    }
    let (token_a, _) = step("a: revisit", a.visit(&mut ch_a, session_a, SITE_BANK, "login"))?;
    let (token_b, _) = step("b: revisit", b.visit(&mut ch_b, session_b, SITE_MAIL, "login"))?;
    let (ok, _) = step("a: submit", a.submit(&mut ch_a, session_a, token_a))?;
    let (ok_b, _) = step("b: submit", b.submit(&mut ch_b, session_b, token_b))?;
    if !(ok && ok_b) {
        return Err(ScriptError("interleaved submissions must both land".into()));
    }

    // Sessions are endpoint-bound: b cannot ride a's session id.
    let hijack = b.visit(&mut ch_b, session_a, SITE_BANK, "login");
    match &hijack {
        Err(ClientError::Refused { code, .. }) if code == codes::NOT_AUTHENTICATED => {}
        other => return Err(ScriptError(format!("cross-endpoint session honored: {other:?}"))),
    }

    // The single launch gate: a handshake in progress turns others away,
    // and an abandoned one is evicted once stale.
    let offer = sim.client_request(CLIENT_ADDR, Frame::TunnelRequest);
    if !matches!(offer, Frame::TunnelOffer { .. }) {
        return Err(ScriptError(format!("expected a tunnel offer, got {offer:?}")));
    }
    let busy = sim.client_request(KIOSK_ADDR, Frame::TunnelRequest);
    match &busy {
        Frame::Error { code, .. } if code == codes::BUSY => {}
        other => return Err(ScriptError(format!("expected busy, got {other:?}"))),
    }
    sim.world.proxy.advance_clock(sim.world.proxy.config().tunnel_pending_ticks);
    let evicted = sim.client_request(KIOSK_ADDR, Frame::TunnelRequest);
    if !matches!(evicted, Frame::TunnelOffer { .. }) {
        return Err(ScriptError(format!("stale handshake not evicted: {evicted:?}")));
    }
    ctx.note("busy signaling, stale eviction, and session isolation all held under interleaving");
    Ok(Outcome::FlowSucceeds)
}
