//! An annotated walkthrough of the honest flow, for humans.
//!
//! `demo` drives one complete run — boot, registration, both login kinds,
//! enrollment, submission, update — against a throwaway world and narrates
//! every frame as it crosses the simulated network, with the live values
//! (digests, session ids, rendered dummies) spliced into the prose.

use std::fmt::Write as _;

use crate::leak;
use crate::sim::Sim;
use crate::world::{
    World, BANK_PASSWORD, BANK_PASSWORD_ROTATED, CLIENT_ADDR, MAIL_PASSWORD, MASTER_PASSWORD,
    SECRET_PHRASE, SITE_BANK, SITE_MAIL, USER_ID,
};

/// One-line gloss for each frame kind that appears in the honest flow.
fn gloss(kind: &str) -> &'static str {
    match kind {
        "tunnel-request" => "client asks for a fresh kernel tunnel",
        "tunnel-offer" => "kernel-minted public key, launch-bound, with a freshness nonce",
        "attest-challenge" => "client picks its own nonce and demands evidence",
        "attest-response" => "quote over the launch register plus the measurement log",
        "register-request" => "master password and secret phrase, sealed to the attested key",
        "register-response" => "one-time password-list parameters for the printed sheet",
        "login-request" => "proof of identity, sealed to a fresh attested key",
        "login-response" => "session opened, bound to this network endpoint",
        "visit-request" => "ask the manager to fetch a site page",
        "target-connect" => "manager dials the site",
        "target-welcome" => "site certificate and page schemas",
        "page-response" => "page forwarded; credential fields carry dummies at most",
        "enroll-request" => "real credentials, encrypted straight to the kernel key",
        "submit-request" => "user approves the page; dummies to be replaced in the kernel",
        "update-request" => "replacement credentials for a password change",
        "target-submit" => "manager submits the completed form to the site",
        "target-result" => "site verdict",
        "error" => "refusal",
        _ => "",
    }
}

struct Narration {
    out: String,
    cursor: usize,
}

impl Narration {
    fn say(&mut self, text: &str) {
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn blank(&mut self) {
        self.out.push('\n');
    }

    /// Print every frame recorded since the last call.
    fn frames(&mut self, sim: &Sim) {
        for entry in &sim.transcript()[self.cursor..] {
            let kind = entry.frame.kind();
            let seal = if entry.sealed { " (sealed transport)" } else { "" };
            let _ = writeln!(
                self.out,
                "    [{:>3}] {} -> {}  {}{}",
                entry.tick, entry.from, entry.to, kind, seal
            );
            let g = gloss(kind);
            if !g.is_empty() {
                let _ = writeln!(self.out, "          {g}");
            }
        }
        self.cursor = sim.transcript_len();
    }
}

/// Run the honest flow once and return the narrated transcript.
pub fn demo(seed: u64) -> String {
    let dir = tempfile::tempdir().expect("demo directory");
    let sim = Sim::new(World::install(seed, dir.path()));
    let mut n = Narration { out: String::new(), cursor: 0 };

    n.say("trust-in-the-middle: one honest run, narrated");
    n.say(&format!("world seed {seed}; all randomness derives from it"));
    n.blank();

    // Phase 1: trusted boot.
    n.say("phase 1 - trusted boot");
    n.say("  the host measures each module against its manifest before start:");
    let report = sim.world.proxy.boot().expect("honest boot");
    for (module, digest) in &report.modules {
        n.say(&format!("    {:<8} = {}", module, digest.to_hex()));
    }
    n.say("  any mismatch here and the service never comes up.");
    n.blank();

    // Phase 2: registration.
    n.say("phase 2 - registration (one kernel tunnel, then the secrets)");
    let mut client = sim.world.client("alice-workstation");
    let mut ch = sim.channel(CLIENT_ADDR);
    client.establish_tunnel(&mut ch).expect("registration tunnel");
    n.frames(&sim);
    n.say("  the client now holds a key that only a genuine kernel launch");
    n.say("  could have produced; everything sensitive rides inside it.");
    let params = client.register(&mut ch, MASTER_PASSWORD, SECRET_PHRASE).expect("register");
    n.frames(&sim);
    n.say(&format!("  printed password list: {params}"));
    n.blank();

    // Phase 3: one login per password kind.
    n.say("phase 3 - login with the master password");
    client.establish_tunnel(&mut ch).expect("login tunnel");
    client.login_master(&mut ch, MASTER_PASSWORD).expect("master login");
    n.frames(&sim);
    n.say("phase 3' - login with one-time password number one");
    client.establish_tunnel(&mut ch).expect("second login tunnel");
    let session = client.login_otp(&mut ch, SECRET_PHRASE).expect("otp login");
    n.frames(&sim);
    n.say(&format!("  session {session} is live; each password list entry dies on use."));
    n.blank();

    // Phase 4: enrollment and submission at two sites.
    n.say("phase 4 - enroll and log in at two sites");
    for (site, password) in [(SITE_BANK, BANK_PASSWORD), (SITE_MAIL, MAIL_PASSWORD)] {
        let (token, _) = client.visit(&mut ch, session, site, "login").expect("visit");
        client
            .enroll(&mut ch, session, token, &[("username", USER_ID), ("password", password)])
            .expect("enroll");
        let (token, fields) = client.visit(&mut ch, session, site, "login").expect("revisit");
        let dummy = fields
            .iter()
            .find(|(k, _)| k == "password")
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        client.submit(&mut ch, session, token).expect("submit");
        n.frames(&sim);
        n.say(&format!("  {site}: the page rendered `{dummy}` in the password field;"));
        n.say("  the kernel swapped in the real value on the way out.");
    }
    n.blank();

    // Phase 5: password change.
    n.say("phase 5 - rotate one site password through the update page");
    let (token, _) = client.visit(&mut ch, session, SITE_BANK, "update").expect("update page");
    client
        .update(&mut ch, session, token, &[("new_password", BANK_PASSWORD_ROTATED)])
        .expect("update");
    let (token, _) = client.visit(&mut ch, session, SITE_BANK, "login").expect("final visit");
    client.submit(&mut ch, session, token).expect("final submit");
    n.frames(&sim);
    n.say("  the stored record rotated atomically with the site's acceptance.");
    n.blank();

    // Epilogue: what never appeared anywhere.
    n.say("epilogue - sweep for the five standing secrets");
    let findings = leak::scan_sim(&sim);
    if findings.is_empty() {
        n.say(&format!(
            "  {} frames, every file on disk, {} kernel envelopes: no secret appeared anywhere.",
            sim.transcript_len(),
            sim.world.proxy.flicker().exchange_bytes().len(),
        ));
    } else {
        for f in &findings {
            n.say(&format!("  LEAK {f:?}"));
        }
    }
    n.out
}
