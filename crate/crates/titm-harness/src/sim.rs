//! Frame routing with a wire recorder.
//!
//! The simulated network is in-process and single-threaded: a client
//! endpoint calls [`Sim::client_request`], the proxy handles the frame
//! (reaching target sites through the same switchboard), and every frame
//! that crosses a wire lands in the transcript in delivery order. Each
//! entry keeps two views: the decoded frame for assertions, and the bytes
//! an observer on that wire would actually capture — plain encoding on the
//! client side, transport-sealed ciphertext on the proxy↔site legs, which
//! stand in for the authenticated channel a production deployment would
//! run to each site.
//!
//! An optional response tap models an attacker between the proxy and the
//! client: it may rewrite a reply in flight, and the transcript records
//! what was delivered, not what was sent.

use std::cell::{Cell, RefCell};

use rand_chacha::ChaCha20Rng;

use titm::crypto::{self, generate_keypair, KeyPurpose, PublicKey};
use titm::messages::{Channel, ChannelError, Frame, TargetDirectory};

use crate::world::{sub_rng, World, PROXY_ADDR};

/// One frame observed on a wire.
#[derive(Clone, Debug)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub from: String,
    pub to: String,
    /// True on proxy↔site legs: `wire` is transport ciphertext.
    pub sealed: bool,
    /// The bytes visible on the wire itself.
    pub wire: Vec<u8>,
    /// The decoded frame behind `wire`, for assertions and display.
    pub frame: Frame,
}

/// An in-flight rewrite of a proxy reply: (request, reply-being-delivered).
pub type ResponseTap = Box<dyn FnMut(&Frame, &mut Frame)>;

pub struct Sim {
    pub world: World,
    transport_pub: PublicKey,
    transport_rng: RefCell<ChaCha20Rng>,
    transcript: RefCell<Vec<TranscriptEntry>>,
    tick: Cell<u64>,
    response_tap: RefCell<Option<ResponseTap>>,
}

impl Sim {
    pub fn new(world: World) -> Sim {
        let mut rng = sub_rng(world.seed, "site-transport");
        let transport = generate_keypair(KeyPurpose::Proxy, &mut rng);
        Sim {
            world,
            transport_pub: transport.public,
            transport_rng: RefCell::new(rng),
            transcript: RefCell::new(Vec::new()),
            tick: Cell::new(0),
            response_tap: RefCell::new(None),
        }
    }

    /// Install or clear the attacker's in-flight response rewriter.
    pub fn set_response_tap(&self, tap: Option<ResponseTap>) {
        *self.response_tap.borrow_mut() = tap;
    }

    fn record(&self, from: &str, to: &str, sealed: bool, frame: &Frame) {
        let plain = frame.encode();
        let wire = if sealed {
            crypto::encrypt(&self.transport_pub, &plain, &mut *self.transport_rng.borrow_mut())
        } else {
            plain
        };
        let tick = self.tick.get();
        self.tick.set(tick + 1);
        self.transcript.borrow_mut().push(TranscriptEntry {
            tick,
            from: from.to_string(),
            to: to.to_string(),
            sealed,
            wire,
            frame: frame.clone(),
        });
    }

    /// Deliver one frame from a client endpoint to the proxy and return
    /// the (possibly tapped) reply.
    pub fn client_request(&self, from: &str, frame: Frame) -> Frame {
        self.record(from, PROXY_ADDR, false, &frame);
        let mut reply =
            self.world.proxy.handle_frame(from, frame.clone(), &SimTargets { sim: self });
        if let Some(tap) = self.response_tap.borrow_mut().as_mut() {
            tap(&frame, &mut reply);
        }
        self.record(PROXY_ADDR, from, false, &reply);
        reply
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.borrow().clone()
    }

    pub fn transcript_len(&self) -> usize {
        self.transcript.borrow().len()
    }

    /// A [`Channel`] view of this network for one client endpoint.
    pub fn channel(&self, endpoint: &str) -> SimChannel<'_> {
        SimChannel { sim: self, endpoint: endpoint.to_string() }
    }
}

pub struct SimChannel<'a> {
    sim: &'a Sim,
    endpoint: String,
}

impl Channel for SimChannel<'_> {
    fn request(&mut self, frame: Frame) -> Result<Frame, ChannelError> {
        Ok(self.sim.client_request(&self.endpoint, frame))
    }
}

/// The proxy's view of the sites, routed through the recorder.
struct SimTargets<'a> {
    sim: &'a Sim,
}

impl TargetDirectory for SimTargets<'_> {
    fn request(&self, site_id: &str, frame: Frame) -> Result<Frame, ChannelError> {
        let Some(site) = self.sim.world.sites.get(site_id) else {
            return Err(ChannelError::Unreachable(site_id.to_string()));
        };
        self.sim.record(PROXY_ADDR, site_id, true, &frame);
        let reply = site.handle(frame);
        self.sim.record(site_id, PROXY_ADDR, true, &reply);
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{self, CLIENT_ADDR};
    use titm::messages::codes;

    fn booted_sim(seed: u64) -> (tempfile::TempDir, Sim) {
        let dir = tempfile::tempdir().unwrap();
        let world = World::install(seed, dir.path());
        world.proxy.boot().unwrap();
        (dir, Sim::new(world))
    }

    #[test]
    fn frames_are_recorded_in_delivery_order() {
        let (_dir, sim) = booted_sim(21);
        let reply = sim.client_request(CLIENT_ADDR, Frame::TunnelRequest);
        assert!(matches!(reply, Frame::TunnelOffer { .. }));
        let t = sim.transcript();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].from.as_str(), t[0].to.as_str()), (CLIENT_ADDR, PROXY_ADDR));
        assert_eq!((t[1].from.as_str(), t[1].to.as_str()), (PROXY_ADDR, CLIENT_ADDR));
        assert_eq!(t[0].tick, 0);
        assert_eq!(t[1].tick, 1);
        assert!(!t[0].sealed);
        assert_eq!(t[0].wire, t[0].frame.encode());
    }

    #[test]
    fn site_legs_are_recorded_sealed_between_request_and_reply() {
        let (_dir, sim) = booted_sim(22);
        let mut client = sim.world.client("client");
        let mut ch = sim.channel(CLIENT_ADDR);
        client.establish_tunnel(&mut ch).unwrap();
        client.register(&mut ch, world::MASTER_PASSWORD, world::SECRET_PHRASE).unwrap();
        client.establish_tunnel(&mut ch).unwrap();
        let session = client.login_master(&mut ch, world::MASTER_PASSWORD).unwrap();
        let before = sim.transcript_len();
        client.visit(&mut ch, session, world::SITE_BANK, "login").unwrap();
        let t = sim.transcript();
        let kinds: Vec<&str> = t[before..].iter().map(|e| e.frame.kind()).collect();
        assert_eq!(kinds, ["visit-request", "target-connect", "target-welcome", "page-response"]);
        // the site legs travel sealed: ciphertext on the wire, and never
        // the frame's own encoding
        for entry in &t[before..] {
            if entry.from != CLIENT_ADDR && entry.to != CLIENT_ADDR {
                assert!(entry.sealed);
                assert_ne!(entry.wire, entry.frame.encode());
            }
        }
    }

    #[test]
    fn response_tap_rewrites_in_flight() {
        let (_dir, sim) = booted_sim(23);
        sim.set_response_tap(Some(Box::new(|_req, reply| {
            *reply = Frame::error(codes::BUSY, "intercepted");
        })));
        let reply = sim.client_request(CLIENT_ADDR, Frame::TunnelRequest);
        assert_eq!(reply, Frame::error(codes::BUSY, "intercepted"));
        // the transcript shows the tampered frame, as a wire observer would
        let t = sim.transcript();
        assert_eq!(t.last().unwrap().frame, Frame::error(codes::BUSY, "intercepted"));
    }

    #[test]
    fn same_seed_records_identical_wires() {
        let run = |seed| {
            let (_dir, sim) = booted_sim(seed);
            let mut client = sim.world.client("client");
            let mut ch = sim.channel(CLIENT_ADDR);
            client.establish_tunnel(&mut ch).unwrap();
            client.register(&mut ch, world::MASTER_PASSWORD, world::SECRET_PHRASE).unwrap();
            sim.transcript().iter().map(|e| e.wire.clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(24), run(24));
        assert_ne!(run(24), run(25));
    }
}
