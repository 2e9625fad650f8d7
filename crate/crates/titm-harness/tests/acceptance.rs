//! The release gate: eight numbered checks, each a headline property of the
//! whole stack, each with a hard time budget. Every digest constant below
//! was computed before this codebase existed, with Python's hashlib — if
//! the implementation drifts, these tests cannot drift with it.
//!
//! Run with `--nocapture` to see one summary line per criterion.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand_core::RngCore;

use titm::crypto::{generate_keypair, hash, Digest, KeyPurpose, Nonce};
use titm::messages::Frame;
use titm::otp::{self, OtpError, OtpParams};
use titm::pal::{self, LOG_LABEL_FLICKER, LOG_LABEL_PROXY};
use titm::tpm::{extend_digest, verify_quote, QuoteRejection, TpmEmulator, PCR_DRTM};

use titm_harness::leak;
use titm_harness::scenario::{builtin_scenarios, find_scenario, run_scenario, Outcome};
use titm_harness::sim::Sim;
use titm_harness::transcript::TranscriptFile;
use titm_harness::world::{
    sub_rng, World, BANK_PASSWORD, BANK_PASSWORD_ROTATED, CLIENT_ADDR, FLICKER_IMAGE,
    MAIL_PASSWORD, MASTER_PASSWORD, PAL_IMAGE, PROXY_ADDR, PROXY_IMAGE, SECRET_PHRASE,
    SITE_BANK, SITE_MAIL, USER_ID,
};

/// Assert the budget and print the per-criterion summary line.
fn finish(which: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed < budget,
        "{which}: took {elapsed:?}, budget is {budget:?}"
    );
    println!("PASS  {which:<58} {:>7.1?} (budget {budget:?})", elapsed);
}

// ---------------------------------------------------------------------------
// 1. Launch-register chain correctness

/// The frozen fixture images. Their digests, and the chain those digests
/// extend to, were computed independently of this codebase.
const CHAIN_PAL_IMG: &[u8] = b"titm-pal-image-v1: four-phase security kernel executing under drtm\n";
const CHAIN_FLICKER_IMG: &[u8] = b"titm-flicker-image-v1: suspend, launch, resume shim\n";
const CHAIN_PROXY_IMG: &[u8] = b"titm-proxy-image-v1: interception proxy with form engine\n";
const CHAIN_FROM_IMAGES: &str = "92c0961769c4ce1669f3c635d89ee8d19632478f";
const CHAIN_FROM_DIGESTS: &str = "8918de8d9a34e01f44130ca7f5865e7322757c24";

#[test]
fn criterion_1_launch_register_chain_matches_frozen_values() {
    let t = Instant::now();

    // Pure extend rule over abstract digests: three extends from the
    // all-zero register must reproduce the frozen chain byte for byte.
    let d_pal = hash(b"pal-digest-fixture");
    let d_flicker = hash(b"flicker-digest-fixture");
    let d_proxy = hash(b"pm-digest-fixture");
    let chained = extend_digest(
        &extend_digest(&extend_digest(&Digest::ZERO, &d_pal), &d_flicker),
        &d_proxy,
    );
    assert_eq!(chained.to_hex(), CHAIN_FROM_DIGESTS);
    assert_eq!(pal::expected_chain(&d_pal, &d_flicker, &d_proxy), chained);

    // Live register bank: a measured launch of the fixture kernel image
    // followed by the two phase-one extends must land the launch register
    // exactly on the frozen image chain.
    let mut ca_rng = sub_rng(31, "fixture-ca");
    let ca = generate_keypair(KeyPurpose::Ek, &mut ca_rng);
    let mut tpm = TpmEmulator::new(&ca, sub_rng(31, "fixture-tpm"));
    tpm.drtm_launch(CHAIN_PAL_IMG).unwrap();
    tpm.extend(PCR_DRTM, LOG_LABEL_FLICKER, &hash(CHAIN_FLICKER_IMG)).unwrap();
    let live = tpm.extend(PCR_DRTM, LOG_LABEL_PROXY, &hash(CHAIN_PROXY_IMG)).unwrap();
    assert_eq!(live.to_hex(), CHAIN_FROM_IMAGES);
    assert_eq!(
        live,
        pal::expected_chain(
            &hash(CHAIN_PAL_IMG),
            &hash(CHAIN_FLICKER_IMG),
            &hash(CHAIN_PROXY_IMG)
        )
    );

    // Full stack: boot a deployed world, run one real tunnel handshake,
    // and read the launch register's history. Every value recorded at the
    // phase-one "proxy" extend must equal the chain predicted from the
    // deployed artifact bytes.
    let dir = tempfile::tempdir().unwrap();
    let world_seed = sub_rng(7, "chain-world").next_u64();
    let sim = Sim::new(World::install(world_seed, dir.path()));
    sim.world.proxy.boot().unwrap();
    let mut client = sim.world.client("chain-check");
    let mut ch = sim.channel(CLIENT_ADDR);
    client.establish_tunnel(&mut ch).unwrap();

    let deployed = pal::expected_chain(
        &hash(PAL_IMAGE),
        &hash(FLICKER_IMAGE),
        &hash(PROXY_IMAGE),
    );
    let history = sim.world.proxy.tpm().lock().pcr_history().to_vec();
    let phase_one: Vec<Digest> = history
        .iter()
        .filter(|e| e.pcr_index == PCR_DRTM && e.label == LOG_LABEL_PROXY)
        .map(|e| e.value)
        .collect();
    assert!(!phase_one.is_empty(), "no phase-one extend was recorded");
    for value in phase_one {
        assert_eq!(value, deployed);
    }

    finish("1 launch-register chain, frozen and live", t, Duration::from_secs(1));
}

// ---------------------------------------------------------------------------
// 2. Seal semantics under randomized histories

#[test]
fn criterion_2_unseal_succeeds_exactly_when_register_state_matches() {
    let t = Instant::now();

    let mut rng = sub_rng(2, "seal-histories");
    let ca = generate_keypair(KeyPurpose::Ek, &mut rng);
    let mut tpm = TpmEmulator::new(&ca, sub_rng(2, "seal-tpm"));

    // Mirror of what every register must hold, maintained by replaying the
    // extend rule independently of the emulator.
    let mut mirror = [Digest::ZERO; 24];
    let mut blobs: Vec<(titm::tpm::SealedBlob, Vec<u8>, Digest)> = Vec::new();
    let (mut accepts, mut rejects) = (0u32, 0u32);
    let (mut false_accepts, mut false_rejects) = (0u32, 0u32);

    for round in 0..1000u32 {
        // Occasionally reboot: registers and logs drop to the power-on
        // state, sealed blobs persist.
        if rng.next_u32() % 16 == 0 {
            tpm.platform_reset();
            mirror = [Digest::ZERO; 24];
        }

        // A short burst of extends on random registers.
        for _ in 0..(rng.next_u32() % 3) {
            let idx = (rng.next_u32() % 24) as u8;
            let mut m = [0u8; 20];
            rng.fill_bytes(&mut m);
            let measurement = hash(&m);
            tpm.extend(idx, "history", &measurement).unwrap();
            mirror[idx as usize] = extend_digest(&mirror[idx as usize], &measurement);
            assert_eq!(tpm.pcr(idx).unwrap(), mirror[idx as usize]);
        }

        // Seal a fresh payload against a random register.
        let idx = (rng.next_u32() % 24) as u8;
        let mut payload = vec![0u8; 16];
        rng.fill_bytes(&mut payload);
        let blob = tpm.seal(&payload, idx).unwrap();
        blobs.push((blob, payload, mirror[idx as usize]));

        // Maybe disturb the register the newest blob is bound to.
        if rng.next_u32() % 2 == 0 {
            let measurement = hash(&round.to_le_bytes());
            tpm.extend(idx, "disturb", &measurement).unwrap();
            mirror[idx as usize] = extend_digest(&mirror[idx as usize], &measurement);
        }

        // Try an old blob picked at random, plus always the newest one.
        let mut picks = vec![blobs.len() - 1];
        picks.push((rng.next_u32() as usize) % blobs.len());
        for pick in picks {
            let (blob, payload, sealed_at) = &blobs[pick];
            let should_open = mirror[blob.pcr_index as usize] == *sealed_at;
            match tpm.unseal(blob) {
                Ok(plain) => {
                    assert_eq!(&plain, payload, "unseal returned the wrong plaintext");
                    accepts += 1;
                    if !should_open {
                        false_accepts += 1;
                    }
                }
                Err(_) => {
                    rejects += 1;
                    if should_open {
                        false_rejects += 1;
                    }
                }
            }
        }
    }

    assert_eq!(false_accepts, 0, "a blob opened against the wrong register state");
    assert_eq!(false_rejects, 0, "a blob failed to open against its own register state");
    assert!(accepts > 200 && rejects > 200, "history was not varied enough: {accepts} accepts, {rejects} rejects");

    finish("2 seal/extend/unseal, 1000 randomized histories", t, Duration::from_secs(10));
}

// ---------------------------------------------------------------------------
// 3. Attestation soundness

#[test]
fn criterion_3_quotes_verify_honestly_and_fail_closed() {
    let t = Instant::now();

    let mut rng = sub_rng(3, "attestation");
    let ca = generate_keypair(KeyPurpose::Ek, &mut rng);
    let other_ca = generate_keypair(KeyPurpose::Ek, &mut rng);
    let mut tpm = TpmEmulator::new(&ca, sub_rng(3, "attestation-tpm"));

    // A small, realistic launch history: measured launch plus two extends.
    tpm.drtm_launch(CHAIN_PAL_IMG).unwrap();
    tpm.extend(PCR_DRTM, LOG_LABEL_FLICKER, &hash(CHAIN_FLICKER_IMG)).unwrap();
    tpm.extend(PCR_DRTM, LOG_LABEL_PROXY, &hash(CHAIN_PROXY_IMG)).unwrap();

    let nonce = Nonce::generate(&mut rng);
    let quote = tpm.quote(PCR_DRTM, &nonce).unwrap();
    let log = tpm.sml(PCR_DRTM).unwrap();

    // Honest evidence verifies.
    verify_quote(&quote, &nonce, &log, &ca.public).unwrap();

    // Mutated log entry: replay no longer reproduces the quoted value.
    let mut bad_log = log.clone();
    bad_log.entries[1].1 = hash(b"not what was measured");
    assert!(matches!(
        verify_quote(&quote, &nonce, &bad_log, &ca.public),
        Err(QuoteRejection::LogMismatch { .. })
    ));

    // Mutated signature byte.
    let mut bad_sig = quote.clone();
    bad_sig.signature[0] ^= 0x01;
    assert!(matches!(
        verify_quote(&bad_sig, &nonce, &log, &ca.public),
        Err(QuoteRejection::BadSignature)
    ));

    // Stale nonce: evidence answers an old challenge, and the rejection
    // names both nonces.
    let fresh = Nonce::generate(&mut rng);
    match verify_quote(&quote, &fresh, &log, &ca.public) {
        Err(QuoteRejection::StaleNonce { quoted, expected }) => {
            assert_eq!(quoted, nonce);
            assert_eq!(expected, fresh);
        }
        other => panic!("expected a stale-nonce rejection, got {other:?}"),
    }

    // Wrong authority: the identity certificate does not chain.
    assert!(matches!(
        verify_quote(&quote, &nonce, &log, &other_ca.public),
        Err(QuoteRejection::BadCertificate)
    ));

    // Exhaustive sweep: flipping any single byte of the encoded quote must
    // never yield evidence that still verifies.
    let encoded = quote.encode();
    let mut accepted = 0u32;
    for i in 0..encoded.len() {
        let mut mutated = encoded.clone();
        mutated[i] ^= 0x01;
        if let Ok(q) = titm::tpm::Quote::decode(&mutated) {
            if verify_quote(&q, &nonce, &log, &ca.public).is_ok() {
                accepted += 1;
            }
        }
    }
    assert_eq!(accepted, 0, "a mutated quote was accepted");
    assert!(encoded.len() > 100, "quote too small for the sweep to mean anything");

    finish(
        &format!("3 attestation soundness, {}-byte sweep", encoded.len()),
        t,
        Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------------------
// 4. Honest end-to-end flow, leak-free

#[test]
fn criterion_4_honest_flow_succeeds_with_zero_leaks() {
    let t = Instant::now();

    let scenario = find_scenario("honest-end-to-end").unwrap();
    let report = run_scenario(&scenario, 7);

    assert_eq!(report.script_error, None);
    assert_eq!(report.observed, Some(Outcome::FlowSucceeds));
    assert!(
        report.leaks.is_empty(),
        "secrets surfaced where they must not: {:?}",
        report.leaks
    );
    assert!(report.passed());
    assert!(
        report.entries.len() >= 30,
        "honest flow looks truncated: {} frames",
        report.entries.len()
    );
    assert!(!report.pcr_history.is_empty());

    finish(
        &format!("4 honest end-to-end flow, {} frames, 0 leaks", report.entries.len()),
        t,
        Duration::from_secs(10),
    );
}

// ---------------------------------------------------------------------------
// 5. Every attack scenario lands on its expected outcome

#[test]
fn criterion_5_all_attack_scenarios_detect_as_expected() {
    let t = Instant::now();

    let attacks: Vec<_> = builtin_scenarios().into_iter().filter(|s| s.attack).collect();
    assert!(attacks.len() >= 12, "only {} attack scenarios", attacks.len());

    for scenario in &attacks {
        let report = run_scenario(scenario, 7);
        assert_eq!(
            report.script_error, None,
            "{}: script broke: {:?}",
            scenario.name, report.script_error
        );
        assert_eq!(
            report.observed,
            Some(scenario.expected),
            "{}: observed {:?}",
            scenario.name,
            report.observed
        );
        assert!(
            report.leaks.is_empty(),
            "{}: the attack exposed secrets: {:?}",
            scenario.name,
            report.leaks
        );
        let detection = report
            .detection
            .as_ref()
            .unwrap_or_else(|| panic!("{}: no detection step recorded", scenario.name));
        assert!(
            detection.step < report.entries.len().max(1),
            "{}: detection step {} out of range",
            scenario.name,
            detection.step
        );

        // Determinism: the same seed replays the same wire bytes, the same
        // outcome, and the same detection step.
        let again = run_scenario(scenario, 7);
        assert_eq!(again.observed, report.observed, "{}", scenario.name);
        assert_eq!(
            again.detection.as_ref().map(|d| d.step),
            report.detection.as_ref().map(|d| d.step),
            "{}",
            scenario.name
        );
        let wires = |r: &titm_harness::scenario::Report| {
            r.entries
                .iter()
                .map(|e| (e.tick, e.from.clone(), e.to.clone(), e.sealed, e.wire.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(wires(&again), wires(&report), "{}: wire bytes drifted", scenario.name);
    }

    finish(
        &format!("5 attack catalog, {} scenarios, run twice each", attacks.len()),
        t,
        Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------------------
// 6. Replay resistance over the whole honest transcript

#[test]
fn criterion_6_replaying_every_honest_frame_wins_nothing() {
    let t = Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let world_seed = sub_rng(7, "replay-world").next_u64();
    let sim = Sim::new(World::install(world_seed, dir.path()));
    sim.world.proxy.boot().unwrap();

    // Drive the full honest flow: register, log in, enroll two sites,
    // submit, rotate a password, submit again.
    let mut client = sim.world.client("replay-victim");
    let mut ch = sim.channel(CLIENT_ADDR);
    client.establish_tunnel(&mut ch).unwrap();
    client.register(&mut ch, MASTER_PASSWORD, SECRET_PHRASE).unwrap();
    client.establish_tunnel(&mut ch).unwrap();
    let session = client.login_master(&mut ch, MASTER_PASSWORD).unwrap();
    for (site, password) in [(SITE_BANK, BANK_PASSWORD), (SITE_MAIL, MAIL_PASSWORD)] {
        let (token, _) = client.visit(&mut ch, session, site, "login").unwrap();
        let (ok, detail) = client
            .enroll(&mut ch, session, token, &[("username", USER_ID), ("password", password)])
            .unwrap();
        assert!(ok, "{detail}");
    }
    let (token, _) = client.visit(&mut ch, session, SITE_BANK, "login").unwrap();
    let (ok, _) = client.submit(&mut ch, session, token).unwrap();
    assert!(ok);
    let (token, _) = client.visit(&mut ch, session, SITE_BANK, "update").unwrap();
    let (ok, _) = client
        .update(&mut ch, session, token, &[("new_password", BANK_PASSWORD_ROTATED)])
        .unwrap();
    assert!(ok);
    let (token, _) = client.visit(&mut ch, session, SITE_BANK, "login").unwrap();
    let (ok, _) = client.submit(&mut ch, session, token).unwrap();
    assert!(ok);

    // Snapshot what the sites have seen and every identifier the honest
    // run minted; the replay sweep may add none of the former and reuse
    // none of the latter.
    let originals = sim.transcript();
    let bank_submissions = sim.world.sites[SITE_BANK].submissions().len();
    let mail_submissions = sim.world.sites[SITE_MAIL].submissions().len();
    let minted_tunnels: BTreeSet<u64> = originals
        .iter()
        .filter_map(|e| match e.frame {
            Frame::TunnelOffer { tunnel_id, .. } => Some(tunnel_id),
            _ => None,
        })
        .collect();
    let minted_pages: BTreeSet<u64> = originals
        .iter()
        .filter_map(|e| match e.frame {
            Frame::PageResponse { page_token, .. } => Some(page_token),
            _ => None,
        })
        .collect();

    // The tap: every frame goes back on the wire once, from the endpoint
    // that originally sent it (or back at the proxy for frames it sent).
    // Proxy↔site legs ride a sealed transport, so what the tap recorded
    // there is ciphertext: it must not even parse as a frame, and the
    // synchronous leg offers no seam to splice old records into. Every
    // other frame is re-delivered whole.
    let mut sensitive_replays = 0u32;
    let mut sealed_replays = 0u32;
    for entry in &originals {
        if entry.sealed {
            sealed_replays += 1;
            assert!(
                Frame::decode(&entry.wire).is_err(),
                "a sealed leg was readable off the wire"
            );
            continue;
        }
        let from = if entry.to == PROXY_ADDR { entry.from.as_str() } else { entry.to.as_str() };
        let reply = sim.client_request(from, entry.frame.clone());
        if entry.frame.is_replay_sensitive() {
            sensitive_replays += 1;
            assert!(
                matches!(reply, Frame::Error { .. }),
                "replayed {} was answered with {}",
                entry.frame.kind(),
                reply.kind()
            );
            continue;
        }
        match (&entry.frame, &reply) {
            // A replayed opening handshake gets fresh service, never the
            // recorded artifacts back.
            (Frame::TunnelRequest, Frame::TunnelOffer { tunnel_id, .. }) => {
                assert!(!minted_tunnels.contains(tunnel_id), "tunnel id was reissued");
            }
            // A replayed page fetch against a still-live session renders a
            // fresh page (dummies only) under a token never seen before.
            (Frame::VisitRequest { .. }, Frame::PageResponse { page_token, .. }) => {
                assert!(!minted_pages.contains(page_token), "page token was reissued");
            }
            (_, Frame::Error { .. }) => {}
            (frame, reply) => panic!(
                "replayed {} was answered with {}",
                frame.kind(),
                reply.kind()
            ),
        }
    }
    assert!(
        sensitive_replays >= 8,
        "only {sensitive_replays} credential/evidence frames were swept"
    );
    assert!(sealed_replays >= 8, "only {sealed_replays} sealed legs were swept");

    // Nothing reached a site, and the sweep leaked nothing.
    assert_eq!(sim.world.sites[SITE_BANK].submissions().len(), bank_submissions);
    assert_eq!(sim.world.sites[SITE_MAIL].submissions().len(), mail_submissions);
    let findings = leak::scan_sim(&sim);
    assert!(findings.is_empty(), "replay sweep exposed secrets: {findings:?}");

    finish(
        &format!("6 replay sweep, {} frames, 0 acceptances", originals.len()),
        t,
        Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------------------
// 7. One-time passwords are one-time

#[test]
fn criterion_7_each_password_works_once_and_chains_exhaust_exactly() {
    let t = Instant::now();

    // Frozen vectors for the construction itself.
    let frozen = OtpParams::new("otp-seed-1", 3).unwrap();
    let chain3 = otp::derive_chain("correct horse", &frozen).unwrap();
    assert_eq!(chain3[0].to_hex(), "41b858eba11930caabdd72452ba21467cfb0f435");
    assert_eq!(chain3[1].to_hex(), "a722bf683eeee06474c0b43b05e3603b3beafa43");
    assert_eq!(chain3[2].to_hex(), "3ccf00fcb214fd448d1d3e75c0c370d72f58d48c");
    let state3 = otp::initial_chain("correct horse", &frozen).unwrap();
    assert_eq!(state3.head.to_hex(), "746d2a10f95e003b325803870765d5513ea09bae");

    for n in 1..=64u32 {
        let phrase = format!("phrase number {n}");
        let params = OtpParams::new(format!("seed-{n}"), n).unwrap();
        let chain = otp::derive_chain(&phrase, &params).unwrap();
        assert_eq!(chain.len(), n as usize);

        // Independent re-derivation, one hash tower per element: element i
        // is the base hashed (n - i) more times.
        let mut base_input = phrase.clone().into_bytes();
        base_input.extend_from_slice(params.seed.as_bytes());
        let base = hash(&base_input);
        for i in 1..=n {
            let mut v = base;
            for _ in 0..(n - i) {
                v = hash(v.as_bytes());
            }
            assert_eq!(chain[(i - 1) as usize], v, "n={n}, element {i} disagrees");
        }

        // Play the chain against the verifier: in order, each password is
        // accepted exactly once, every reuse is refused, and login number
        // n + 1 does not exist.
        let mut state = otp::initial_chain(&phrase, &params).unwrap();
        assert_eq!(state.head, hash(chain[0].as_bytes()));
        let mut accepted = 0u32;
        for (i, password) in chain.iter().enumerate() {
            if i > 0 {
                let (ok, next) = otp::verify_and_advance(state, &chain[i - 1]).unwrap();
                assert!(!ok, "n={n}: spent password was accepted again");
                state = next;
            }
            let (ok, next) = otp::verify_and_advance(state, password).unwrap();
            assert!(ok, "n={n}: password {} was refused", i + 1);
            state = next;
            accepted += 1;
            match otp::verify_and_advance(state, password) {
                Ok((ok, next)) => {
                    assert!(!ok, "n={n}: immediate reuse was accepted");
                    state = next;
                }
                Err(OtpError::Exhausted) => assert_eq!(accepted, n),
                Err(other) => panic!("n={n}: {other}"),
            }
        }
        assert_eq!(accepted, n);
        assert_eq!(state.remaining, 0);
        assert!(matches!(
            otp::verify_and_advance(state, &chain[(n - 1) as usize]),
            Err(OtpError::Exhausted)
        ));
    }

    finish("7 one-time property, chain lengths 1..=64", t, Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// 8. Bit-for-bit reproducible runs

#[test]
fn criterion_8_same_seed_writes_identical_transcript_files() {
    let t = Instant::now();

    let exe = env!("CARGO_BIN_EXE_tim");
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.bin");
    let second = dir.path().join("second.bin");

    for path in [&first, &second] {
        let status = std::process::Command::new(exe)
            .args(["run", "all", "--seed", "7", "--transcript"])
            .arg(path)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "a scenario failed under the default seed");
    }

    let bytes_a = std::fs::read(&first).unwrap();
    let bytes_b = std::fs::read(&second).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "two runs with one seed diverged");

    // And the file is a well-formed recording of the full catalog.
    let decoded = TranscriptFile::load(&first).unwrap();
    assert_eq!(decoded.seed, 7);
    assert_eq!(decoded.sections.len(), builtin_scenarios().len());
    assert!(decoded.sections.iter().all(|s| s.outcome != "script-error"));

    finish(
        &format!("8 reproducibility, {} bytes, byte-identical", bytes_a.len()),
        t,
        Duration::from_secs(60),
    );
}
