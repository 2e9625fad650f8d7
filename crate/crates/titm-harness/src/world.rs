//! A complete installed deployment in one directory.
//!
//! `install` lays down the artifact files a real deployment would have —
//! kernel, invocation-layer, and host images, the boot manifest endorsing
//! them, and the proxy's text configuration — then assembles the live
//! pieces around them: certificate authority, TPM, proxy, and target
//! sites. Every random stream is derived from one `u64` seed and a label,
//! so a world rebuilt from the same seed behaves byte-for-byte the same.
//!
//! `resume` reassembles the same world from an already-installed
//! directory, restoring the TPM from its snapshot so sealed state carries
//! across process restarts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;

use titm::client::{Client, ClientProfile, TrustedImages};
use titm::crypto::{self, generate_keypair, hash, AsymKeyPair, KeyPurpose};
use titm::proxy::config::ProxyConfig;
use titm::proxy::Proxy;
use titm::tpm::{SharedTpm, TpmEmulator, TpmError};

use crate::target::TargetSite;

// ---------------------------------------------------------------------------
// Frozen artifact contents. The digests of these byte strings are what the
// manifest endorses and what client profiles pin; changing a byte is the
// same as tampering with a deployed binary.

pub const PAL_IMAGE: &[u8] = b"titm kernel image v1: seal, tunnel, register, authenticate, extract\n";
pub const FLICKER_IMAGE: &[u8] = b"titm invocation layer v1: exclusive measured launch shim\n";
pub const PROXY_IMAGE: &[u8] = b"titm proxy host image v1: manager daemon and storage\n";

// Endpoint names on the simulated network.
pub const PROXY_ADDR: &str = "proxy.sim:7154";
pub const CLIENT_ADDR: &str = "workstation.sim:40001";
pub const KIOSK_ADDR: &str = "kiosk.sim:40002";
pub const ATTACKER_ADDR: &str = "attacker.sim:40666";

// The user and the secrets the harness watches for. Values are long enough
// that a substring hit is never coincidence.
pub const USER_ID: &str = "alice";
pub const MASTER_PASSWORD: &str = "meadow-lantern-orbit-2214";
pub const SECRET_PHRASE: &str = "granite harbor lantern sequence";

pub const SITE_BANK: &str = "bank.example";
pub const SITE_MAIL: &str = "mail.example";
pub const BANK_PASSWORD: &str = "cobalt-harbor-ledger-9912";
pub const MAIL_PASSWORD: &str = "amber-signal-postbox-4431";
pub const BANK_PASSWORD_ROTATED: &str = "quartz-delta-ledger-7788";

/// A value that must never appear on the client wire, in a stored file, or
/// in a kernel exchange envelope.
#[derive(Clone, Debug)]
pub struct Secret {
    pub label: String,
    pub value: String,
}

impl Secret {
    pub fn new(label: impl Into<String>, value: impl Into<String>) -> Secret {
        Secret { label: label.into(), value: value.into() }
    }
}

/// Derive an independent deterministic stream from the world seed.
pub fn sub_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    ChaCha20Rng::from_seed(crypto::sha256(&buf))
}

pub struct World {
    pub seed: u64,
    pub root: PathBuf,
    pub ca: AsymKeyPair,
    pub proxy: Proxy,
    pub sites: BTreeMap<String, TargetSite>,
    pub trusted: TrustedImages,
    pub secrets: Vec<Secret>,
}

fn write_artifacts(root: &Path) {
    fs::create_dir_all(root).expect("world directory is writable");
    fs::write(root.join("pal.img"), PAL_IMAGE).expect("artifact write");
    fs::write(root.join("flicker.img"), FLICKER_IMAGE).expect("artifact write");
    fs::write(root.join("pm.img"), PROXY_IMAGE).expect("artifact write");
    let manifest = format!(
        "# modules endorsed for trusted boot\nproxy = {}\nflicker = {}\n",
        hash(PROXY_IMAGE).to_hex(),
        hash(FLICKER_IMAGE).to_hex(),
    );
    fs::write(root.join("boot-manifest.txt"), manifest).expect("manifest write");
}

pub fn config_for(root: &Path) -> ProxyConfig {
    ProxyConfig {
        listen_address: PROXY_ADDR.to_string(),
        db_path: root.join("proxy.db"),
        manifest_path: root.join("boot-manifest.txt"),
        pal_image: root.join("pal.img"),
        flicker_image: root.join("flicker.img"),
        proxy_image: root.join("pm.img"),
        ..ProxyConfig::default()
    }
}

fn assemble(seed: u64, root: &Path, tpm: TpmEmulator, run: u64) -> World {
    // the config file round-trips through the text parser every time, so
    // the deployed surface is what actually gets exercised
    let cfg_path = root.join("proxy.conf");
    let cfg = ProxyConfig::from_file(&cfg_path).expect("config file parses");

    let mut ca_rng = sub_rng(seed, "ca");
    let ca = generate_keypair(KeyPurpose::Ek, &mut ca_rng);
    let tpm: SharedTpm = Arc::new(Mutex::new(tpm));
    let proxy = Proxy::new(
        cfg,
        ca.public.clone(),
        tpm,
        sub_rng(seed, &format!("proxy-rng:{run}")),
    )
    .expect("proxy assembles over installed artifacts");

    let mut sites = BTreeMap::new();
    for (site_id, password) in [(SITE_BANK, BANK_PASSWORD), (SITE_MAIL, MAIL_PASSWORD)] {
        let site = TargetSite::new(&ca, site_id, &mut sub_rng(seed, &format!("site:{site_id}")));
        site.set_account(USER_ID, password);
        sites.insert(site_id.to_string(), site);
    }

    let trusted = TrustedImages {
        pal: hash(PAL_IMAGE),
        flicker: hash(FLICKER_IMAGE),
        proxy: hash(PROXY_IMAGE),
    };
    let secrets = vec![
        Secret::new("master-password", MASTER_PASSWORD),
        Secret::new("secret-phrase", SECRET_PHRASE),
        Secret::new("bank-password", BANK_PASSWORD),
        Secret::new("mail-password", MAIL_PASSWORD),
        Secret::new("bank-password-rotated", BANK_PASSWORD_ROTATED),
    ];
    World { seed, root: root.to_path_buf(), ca, proxy, sites, trusted, secrets }
}

impl World {
    /// Lay down a fresh installation in `root` and assemble it.
    pub fn install(seed: u64, root: &Path) -> World {
        write_artifacts(root);
        let cfg = config_for(root);
        fs::write(root.join("proxy.conf"), cfg.to_text()).expect("config write");
        let mut ca_rng = sub_rng(seed, "ca");
        let ca = generate_keypair(KeyPurpose::Ek, &mut ca_rng);
        let tpm = TpmEmulator::new(&ca, sub_rng(seed, "tpm"));
        assemble(seed, root, tpm, 0)
    }

    /// Reassemble an installed world, restoring the TPM from its snapshot
    /// when one was saved. `run` separates the random streams of repeated
    /// invocations over the same installation.
    pub fn resume(seed: u64, root: &Path, run: u64) -> Result<World, TpmError> {
        let snap_path = root.join("tpm.snap");
        let tpm = if snap_path.exists() {
            let bytes = fs::read(&snap_path).map_err(|_| TpmError::Snapshot("unreadable"))?;
            TpmEmulator::restore(&bytes)?
        } else {
            let mut ca_rng = sub_rng(seed, "ca");
            let ca = generate_keypair(KeyPurpose::Ek, &mut ca_rng);
            TpmEmulator::new(&ca, sub_rng(seed, "tpm"))
        };
        Ok(assemble(seed, root, tpm, run))
    }

    /// Persist the TPM state so `resume` finds it.
    pub fn save_tpm(&self) -> std::io::Result<()> {
        let bytes = self.proxy.tpm().lock().snapshot();
        fs::write(self.root.join("tpm.snap"), bytes)
    }

    /// A client profile trusting this world's authority and image digests.
    pub fn profile(&self) -> ClientProfile {
        ClientProfile::new(USER_ID, PROXY_ADDR, self.ca.public.clone(), self.trusted.clone())
    }

    /// A fresh client with its own derived random stream.
    pub fn client(&self, label: &str) -> Client {
        Client::new(self.profile(), sub_rng(self.seed, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn install_boots_and_is_seed_stable() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::install(11, dir.path());
        world.proxy.boot().unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let world2 = World::install(11, dir2.path());
        assert_eq!(world.ca.public, world2.ca.public);
        assert_eq!(
            world.sites[SITE_BANK].certificate().encode(),
            world2.sites[SITE_BANK].certificate().encode()
        );
    }

    #[test]
    fn resume_restores_the_same_tpm() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::install(12, dir.path());
        world.proxy.boot().unwrap();
        world.save_tpm().unwrap();
        let resumed = World::resume(12, dir.path(), 1).unwrap();
        // the snapshot carries the booted register state
        let before = world.proxy.tpm().lock().pcr(0).unwrap();
        let after = resumed.proxy.tpm().lock().pcr(0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn sub_streams_are_independent_and_stable() {
        use rand_core::RngCore;
        let mut a1 = sub_rng(5, "a");
        let mut a2 = sub_rng(5, "a");
        let mut b = sub_rng(5, "b");
        assert_eq!(a1.next_u64(), a2.next_u64());
        assert_ne!(a1.next_u64(), b.next_u64());
    }
}
