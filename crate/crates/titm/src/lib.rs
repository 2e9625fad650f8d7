//! Trust-in-the-middle authentication proxy, desk-scale and fully executable.
//!
//! The system puts a hardened proxy between a user's client and the web
//! sites they log into. Real credentials live only in encrypted records
//! that the proxy's operating system can never read: all decryption happens
//! inside a small security kernel (the PAL) launched under an emulated
//! TPM 1.2's dynamic root of trust, and everything the PAL stores is sealed
//! to the platform-configuration-register state produced by measuring the
//! launcher, the kernel, and the proxy binary. Clients verify that chain by
//! remote attestation before a single secret crosses the wire.
//!
//! Module map:
//! - [`wire`]: canonical binary encodings for everything hashed or persisted
//! - [`crypto`]: SHA-1 digests, Curve25519 hybrid encryption, signatures
//! - [`tpm`]: the TPM 1.2 emulator (PCRs, extend, seal, quote, launch)
//! - [`otp`]: S/Key-style one-time-password hash chains
//! - [`pal`]: the security kernel and its envelope interface
//! - [`messages`]: the framed wire protocol between client, proxy, targets
//! - [`proxy`]: trusted boot, interception, form engine, credential store
//! - [`client`]: the user-side driver, attestation verifier, and add-on
//!
//! The companion crate `titm-harness` supplies the simulated network, the
//! target-site stubs, attack scenarios, and the `tim` / `tim-client` CLIs.

pub mod client;
pub mod crypto;
pub mod messages;
pub mod otp;
pub mod pal;
pub mod proxy;
pub mod tpm;
pub mod wire;
