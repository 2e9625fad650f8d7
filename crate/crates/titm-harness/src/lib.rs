//! Simulated-network harness for the credential-proxy stack.
//!
//! Everything here is plumbing around the `titm` library: a [`world`] that
//! installs a complete deployment into a directory, a [`sim`] that routes
//! frames between the client, the proxy, and [`target`] sites while
//! recording a transcript, a [`leak`] scanner that proves no registered
//! secret ever shows up where it must not, and a [`scenario`] catalog that
//! drives the honest flow and twelve-plus attack variants to their
//! expected outcomes. [`transcript`] serializes recorded runs; [`demo`]
//! narrates the honest flow step by step.

pub mod demo;
pub mod leak;
pub mod scenario;
pub mod sim;
pub mod target;
pub mod transcript;
pub mod world;
