//! S/Key-style one-time-password hash chains.
//!
//! The generator side derives a list of N passwords from a secret phrase
//! and a public seed; the verifier holds only the head of the chain. Each
//! submitted password must hash to the current head; on success the head
//! moves to the accepted password, so every password works exactly once
//! and nothing the verifier stores reveals a usable password.
//!
//! Construction (full-width SHA-1, not the folded words of classic OPIE):
//!
//! ```text
//! base       = H(secret_phrase || seed)
//! element[i] = H^(N-i)(base)          i = 1..=N   (element N = base)
//! head       = H^N(base)              = H(element[1])
//! ```
//!
//! Passwords print as the 40-char lowercase hex of the digest. Parameters
//! travel as the single printable line `otp/v1;seed=<s>;n=<N>`.

use thiserror::Error;

use crate::crypto::{hash, Digest};

pub const ALGORITHM_TAG: &str = "otp/v1";
pub const DEFAULT_CHAIN_LENGTH: u32 = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OtpError {
    #[error("chain exhausted: no logins remain")]
    Exhausted,
    #[error("malformed otp parameters: {0}")]
    BadParams(String),
}

/// Public chain parameters handed from verifier to generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OtpParams {
    pub seed: String,
    pub count: u32,
    pub algorithm_tag: String,
}

impl OtpParams {
    pub fn new(seed: impl Into<String>, count: u32) -> Result<Self, OtpError> {
        let params = OtpParams {
            seed: seed.into(),
            count,
            algorithm_tag: ALGORITHM_TAG.to_string(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), OtpError> {
        if self.count < 1 {
            return Err(OtpError::BadParams("chain length must be >= 1".into()));
        }
        if self.seed.is_empty() {
            return Err(OtpError::BadParams("seed must be non-empty".into()));
        }
        if self.seed.contains(';') || self.seed.contains('=') {
            return Err(OtpError::BadParams("seed must not contain ';' or '='".into()));
        }
        if self.algorithm_tag != ALGORITHM_TAG {
            return Err(OtpError::BadParams(format!(
                "unsupported algorithm tag {:?}",
                self.algorithm_tag
            )));
        }
        Ok(())
    }

    /// The printable parameter line, e.g. `otp/v1;seed=lk3j;n=100`.
    pub fn to_line(&self) -> String {
        format!("{};seed={};n={}", self.algorithm_tag, self.seed, self.count)
    }

    pub fn from_line(line: &str) -> Result<Self, OtpError> {
        let mut parts = line.trim().split(';');
        let tag = parts
            .next()
            .ok_or_else(|| OtpError::BadParams("empty line".into()))?;
        let mut seed = None;
        let mut count = None;
        for part in parts {
            match part.split_once('=') {
                Some(("seed", v)) => seed = Some(v.to_string()),
                Some(("n", v)) => {
                    count = Some(v.parse::<u32>().map_err(|_| {
                        OtpError::BadParams(format!("chain length {v:?} is not a number"))
                    })?)
                }
                _ => return Err(OtpError::BadParams(format!("unknown part {part:?}"))),
            }
        }
        let params = OtpParams {
            seed: seed.ok_or_else(|| OtpError::BadParams("missing seed".into()))?,
            count: count.ok_or_else(|| OtpError::BadParams("missing n".into()))?,
            algorithm_tag: tag.to_string(),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Verifier state: the head of the chain plus the number of logins left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OtpChain {
    pub head: Digest,
    pub remaining: u32,
}

fn base_digest(secret_phrase: &str, seed: &str) -> Digest {
    let mut buf = Vec::with_capacity(secret_phrase.len() + seed.len());
    buf.extend_from_slice(secret_phrase.as_bytes());
    buf.extend_from_slice(seed.as_bytes());
    hash(&buf)
}

fn iterate(mut d: Digest, times: u32) -> Digest {
    for _ in 0..times {
        d = hash(d.as_bytes());
    }
    d
}

/// Derive the generator's password list: element i = H^(N-i)(base), so the
/// list is presented in the order passwords are consumed (most-hashed
/// first) and element N is the base itself.
pub fn derive_chain(secret_phrase: &str, params: &OtpParams) -> Result<Vec<Digest>, OtpError> {
    params.validate()?;
    let base = base_digest(secret_phrase, &params.seed);
    let mut elements: Vec<Digest> = Vec::with_capacity(params.count as usize);
    // generate base, H(base), ... H^(N-1)(base), then reverse
    let mut cur = base;
    elements.push(cur);
    for _ in 1..params.count {
        cur = hash(cur.as_bytes());
        elements.push(cur);
    }
    elements.reverse();
    Ok(elements)
}

/// The verifier's initial state: head = H^N(base) = H(element 1).
pub fn initial_chain(secret_phrase: &str, params: &OtpParams) -> Result<OtpChain, OtpError> {
    params.validate()?;
    let base = base_digest(secret_phrase, &params.seed);
    Ok(OtpChain {
        head: iterate(base, params.count),
        remaining: params.count,
    })
}

/// Check one candidate password. Accepts iff H(candidate) equals the head;
/// on acceptance the head becomes the candidate and one login is consumed.
/// The input chain is returned unchanged on rejection.
pub fn verify_and_advance(chain: OtpChain, candidate: &Digest) -> Result<(bool, OtpChain), OtpError> {
    if chain.remaining == 0 {
        return Err(OtpError::Exhausted);
    }
    if hash(candidate.as_bytes()) == chain.head {
        Ok((
            true,
            OtpChain {
                head: *candidate,
                remaining: chain.remaining - 1,
            },
        ))
    } else {
        Ok((false, chain))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: u32) -> OtpParams {
        OtpParams::new("otp-seed-1", n).unwrap()
    }

    #[test]
    fn single_element_chain_is_the_base() {
        let list = derive_chain("correct horse", &params(1)).unwrap();
        assert_eq!(list.len(), 1);
        // base = sha1("correct horse" || "otp-seed-1"), frozen from oracle
        assert_eq!(list[0].to_hex(), "3ccf00fcb214fd448d1d3e75c0c370d72f58d48c");
        let chain = initial_chain("correct horse", &params(1)).unwrap();
        assert_eq!(chain.head.to_hex(), "a722bf683eeee06474c0b43b05e3603b3beafa43");
        let (ok, after) = verify_and_advance(chain, &list[0]).unwrap();
        assert!(ok);
        assert_eq!(after.remaining, 0);
    }

    #[test]
    fn three_element_chain_matches_oracle() {
        // every element and the head frozen from independent re-derivation
        let list = derive_chain("correct horse", &params(3)).unwrap();
        let hexes: Vec<String> = list.iter().map(|d| d.to_hex()).collect();
        assert_eq!(
            hexes,
            vec![
                "41b858eba11930caabdd72452ba21467cfb0f435",
                "a722bf683eeee06474c0b43b05e3603b3beafa43",
                "3ccf00fcb214fd448d1d3e75c0c370d72f58d48c",
            ]
        );
        let chain = initial_chain("correct horse", &params(3)).unwrap();
        assert_eq!(chain.head.to_hex(), "746d2a10f95e003b325803870765d5513ea09bae");
        // verifier ordering convention: H(element[i]) = element[i-1],
        // with H(element[1]) = head
        assert_eq!(hash(list[0].as_bytes()), chain.head);
        for i in 1..list.len() {
            assert_eq!(hash(list[i].as_bytes()), list[i - 1]);
        }
    }

    #[test]
    fn derivation_is_deterministic() {
        let a = derive_chain("phrase", &params(16)).unwrap();
        let b = derive_chain("phrase", &params(16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_consumption_in_order() {
        let n = 5;
        let list = derive_chain("phrase", &params(n)).unwrap();
        let mut chain = initial_chain("phrase", &params(n)).unwrap();
        for pw in &list {
            let (ok, next) = verify_and_advance(chain, pw).unwrap();
            assert!(ok);
            chain = next;
        }
        assert_eq!(chain.remaining, 0);
        assert_eq!(
            verify_and_advance(chain, &list[0]).unwrap_err(),
            OtpError::Exhausted
        );
    }

    #[test]
    fn replay_of_used_password_fails_and_leaves_chain_unchanged() {
        let list = derive_chain("phrase", &params(3)).unwrap();
        let chain0 = initial_chain("phrase", &params(3)).unwrap();
        let (ok, chain1) = verify_and_advance(chain0, &list[0]).unwrap();
        assert!(ok);
        let (ok, chain_same) = verify_and_advance(chain1, &list[0]).unwrap();
        assert!(!ok);
        assert_eq!(chain_same, chain1);
    }

    #[test]
    fn out_of_order_password_fails() {
        let list = derive_chain("phrase", &params(3)).unwrap();
        let chain = initial_chain("phrase", &params(3)).unwrap();
        let (ok, unchanged) = verify_and_advance(chain, &list[1]).unwrap();
        assert!(!ok);
        assert_eq!(unchanged, chain);
    }

    #[test]
    fn params_line_round_trip() {
        let p = params(100);
        assert_eq!(p.to_line(), "otp/v1;seed=otp-seed-1;n=100");
        assert_eq!(OtpParams::from_line(&p.to_line()).unwrap(), p);
        assert!(OtpParams::from_line("otp/v2;seed=x;n=3").is_err());
        assert!(OtpParams::from_line("otp/v1;n=3").is_err());
        assert!(OtpParams::from_line("otp/v1;seed=x;n=0").is_err());
        assert!(OtpParams::from_line("otp/v1;seed=x;n=zebra").is_err());
    }

    #[test]
    fn password_hex_is_forty_lowercase_chars() {
        let list = derive_chain("phrase", &params(2)).unwrap();
        for d in list {
            let s = d.to_hex();
            assert_eq!(s.len(), 40);
            assert!(s.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        }
    }
}
