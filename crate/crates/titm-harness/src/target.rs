//! Behavioral stubs for the sites the proxy logs into.
//!
//! A target site holds a keypair certified by the harness authority, a
//! login page and an update page, and an account table. Submissions are
//! judged the way a real site would: a login succeeds iff the submitted
//! credentials equal the stored ones; an update requires the old password
//! and replaces it atomically. Every submission is also recorded verbatim
//! so tests can check exactly what reached the site.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use titm::crypto::{generate_keypair, AsymKeyPair, Certificate, KeyPurpose};
use titm::messages::{codes, Frame};
use titm::proxy::forms::FormSchema;

pub struct TargetSite {
    site_id: String,
    key: AsymKeyPair,
    cert: RefCell<Certificate>,
    login_schema: FormSchema,
    update_schema: FormSchema,
    accounts: RefCell<BTreeMap<String, String>>,
    submissions: RefCell<Vec<(String, Vec<(String, String)>)>>,
}

impl TargetSite {
    pub fn new(ca: &AsymKeyPair, site_id: &str, rng: &mut ChaCha20Rng) -> TargetSite {
        let key = generate_keypair(KeyPurpose::Proxy, rng);
        let cert = Certificate::issue(ca, site_id, &key.public);
        TargetSite {
            site_id: site_id.to_string(),
            key,
            cert: RefCell::new(cert),
            login_schema: FormSchema::login(&["username", "password"], &["username", "password"]),
            update_schema: FormSchema::update(
                &["old_password", "new_password"],
                &["new_password"],
                &["old_password"],
            ),
            accounts: RefCell::new(BTreeMap::new()),
            submissions: RefCell::new(Vec::new()),
        }
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn certificate(&self) -> Certificate {
        self.cert.borrow().clone()
    }

    /// Swap the presented certificate for one issued by another authority,
    /// modeling an impostor standing in front of the real site.
    pub fn forge_certificate(&self, rogue_ca: &AsymKeyPair) {
        *self.cert.borrow_mut() = Certificate::issue(rogue_ca, &self.site_id, &self.key.public);
    }

    pub fn set_account(&self, user: &str, password: &str) {
        self.accounts.borrow_mut().insert(user.to_string(), password.to_string());
    }

    pub fn password_of(&self, user: &str) -> Option<String> {
        self.accounts.borrow().get(user).cloned()
    }

    pub fn accounts(&self) -> BTreeMap<String, String> {
        self.accounts.borrow().clone()
    }

    /// Every submission that reached this site, oldest first.
    pub fn submissions(&self) -> Vec<(String, Vec<(String, String)>)> {
        self.submissions.borrow().clone()
    }

    pub fn handle(&self, frame: Frame) -> Frame {
        match frame {
            Frame::TargetConnect => Frame::TargetWelcome {
                site_id: self.site_id.clone(),
                cert: self.cert.borrow().encode(),
                login_schema: self.login_schema.encode(),
                update_schema: self.update_schema.encode(),
            },
            Frame::TargetSubmit { kind, fields } => {
                self.submissions.borrow_mut().push((kind.clone(), fields.clone()));
                let map: BTreeMap<String, String> = fields.into_iter().collect();
                let empty = String::new();
                let user = map.get("username").unwrap_or(&empty);
                let mut accounts = self.accounts.borrow_mut();
                let (ok, detail) = match kind.as_str() {
                    "login" => {
                        let ok = accounts.get(user).is_some_and(|stored| {
                            map.get("password").is_some_and(|given| given == stored)
                        });
                        (ok, if ok { "welcome back" } else { "invalid credentials" })
                    }
                    "update" => {
                        let authorized = accounts.get(user).is_some_and(|stored| {
                            map.get("old_password").is_some_and(|given| given == stored)
                        });
                        match (authorized, map.get("new_password")) {
                            (true, Some(new_password)) => {
                                accounts.insert(user.clone(), new_password.clone());
                                (true, "password changed")
                            }
                            (true, None) => (false, "no replacement supplied"),
                            (false, _) => (false, "invalid credentials"),
                        }
                    }
                    _ => (false, "unknown form kind"),
                };
                Frame::TargetResult { ok, detail: detail.to_string() }
            }
            _ => Frame::error(codes::BAD_REQUEST, "target cannot serve this frame"),
        }
    }
}
