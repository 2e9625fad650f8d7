//! The plaintext-secret scanner.
//!
//! After a scenario runs, everything an attacker could have captured gets
//! swept for substring occurrences of the registered secrets: every wire
//! byte in the transcript, every file persisted under the deployment root,
//! and every envelope that crossed the kernel exchange window. The secrets
//! are long random-looking strings, so a hit is never coincidence — any
//! finding means a credential existed in plaintext somewhere it must not.

use std::fs;
use std::path::Path;

use crate::sim::{Sim, TranscriptEntry};
use crate::world::Secret;

/// One plaintext occurrence of a registered secret.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    /// Which secret (by its registered label).
    pub secret: String,
    /// Where it surfaced, e.g. `frame 12 client→proxy (login-request)`,
    /// `file proxy.db`, `kernel envelope 3`.
    pub location: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} found in {}", self.secret, self.location)
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Scan recorded wire traffic.
pub fn scan_transcript(entries: &[TranscriptEntry], secrets: &[Secret]) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (idx, entry) in entries.iter().enumerate() {
        for secret in secrets {
            if contains(&entry.wire, secret.value.as_bytes()) {
                findings.push(Finding {
                    secret: secret.label.clone(),
                    location: format!(
                        "frame {idx} {}→{} ({})",
                        entry.from,
                        entry.to,
                        entry.frame.kind()
                    ),
                });
            }
        }
    }
    findings
}

/// Scan every regular file under `root`, recursively.
pub fn scan_files(root: &Path, secrets: &[Secret]) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut paths: Vec<_> = entries.flatten().map(|e| e.path()).collect();
        paths.sort();
        for path in paths {
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(bytes) = fs::read(&path) {
                let shown = path.strip_prefix(root).unwrap_or(&path).display().to_string();
                for secret in secrets {
                    if contains(&bytes, secret.value.as_bytes()) {
                        findings.push(Finding {
                            secret: secret.label.clone(),
                            location: format!("file {shown}"),
                        });
                    }
                }
            }
        }
    }
    findings
}

/// Scan the kernel exchange-window history.
pub fn scan_envelopes(envelopes: &[Vec<u8>], secrets: &[Secret]) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (idx, bytes) in envelopes.iter().enumerate() {
        for secret in secrets {
            if contains(bytes, secret.value.as_bytes()) {
                findings.push(Finding {
                    secret: secret.label.clone(),
                    location: format!("kernel envelope {idx}"),
                });
            }
        }
    }
    findings
}

/// Sweep one simulation completely: wires, files, kernel envelopes.
pub fn scan_sim(sim: &Sim) -> Vec<Finding> {
    let secrets = &sim.world.secrets;
    let mut findings = scan_transcript(&sim.transcript(), secrets);
    findings.extend(scan_files(&sim.world.root, secrets));
    findings.extend(scan_envelopes(&sim.world.proxy.flicker().exchange_bytes(), secrets));
    findings
}
