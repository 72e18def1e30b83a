use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;

use super::packet::{ContentObject, Interest};
use super::tables::{ContentStore, Fib, Pit, PitInsert};
use super::{Face, Nack, NackReason, Packet};
use crate::naming::{parse, split_segment, Name, ParsedName};
use crate::trust::{cert_repo_name, identity_from_repo_name, Certificate, CheckOutcome, PacketKind, Validator};

/// Default interest lifetime when none is carried.
pub const DEFAULT_LIFETIME_MS: u64 = 4000;

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct ForwarderStats {
    #[serde(rename = "interestsIn")]
    pub interests_in: u64,
    #[serde(rename = "csHits")]
    pub cs_hits: u64,
    #[serde(rename = "pitAggregated")]
    pub pit_aggregated: u64,
    #[serde(rename = "toApp")]
    pub to_app: u64,
    pub forwarded: u64,
    #[serde(rename = "noRoute")]
    pub no_route: u64,
    pub rejected: u64,
    pub unsolicited: u64,
}

/// Signature check on tile and data interests, applied before the content store so
/// that cached tiles are never handed to other tenants.
pub struct InterestGuard {
    validator: Arc<Validator>,
    stash: Vec<(Interest, Face, Name)>,
    fetching: HashSet<Name>,
}

impl InterestGuard {
    pub fn new(validator: Arc<Validator>) -> Self {
        InterestGuard { validator, stash: Vec::new(), fetching: HashSet::new() }
    }

    pub fn validator(&self) -> &Arc<Validator> {
        &self.validator
    }

    fn applies(name: &Name) -> bool {
        let base = split_segment(name).map_or_else(|| name.clone(), |(b, _)| b);
        matches!(parse(&base), Ok(ParsedName::Tile(_) | ParsedName::Data(_)))
    }
}

pub enum FwdOut {
    Send(Face, Packet),
}

/// Per-node forwarding state machine shared by the simulator and the router.
pub struct Forwarder {
    pub fib: Fib,
    pub pit: Pit,
    pub cs: ContentStore,
    pub stats: ForwarderStats,
    guard: Option<InterestGuard>,
    nonce_base: u64,
    nonce_counter: u64,
}

impl Forwarder {
    pub fn new(cache_capacity: usize, nonce_base: u64) -> Self {
        Forwarder {
            fib: Fib::default(),
            pit: Pit::default(),
            cs: ContentStore::new(cache_capacity),
            stats: ForwarderStats::default(),
            guard: None,
            nonce_base,
            nonce_counter: 0,
        }
    }

    pub fn set_guard(&mut self, guard: Option<InterestGuard>) {
        self.guard = guard;
    }

    pub fn guard(&self) -> Option<&InterestGuard> {
        self.guard.as_ref()
    }

    pub fn on_interest(&mut self, now: f64, interest: Interest, face: Face) -> Vec<FwdOut> {
        let mut out = Vec::new();
        self.interest(now, interest, face, &mut out);
        out
    }

    pub fn on_content(&mut self, now: f64, co: ContentObject, face: Face) -> Vec<FwdOut> {
        let mut out = Vec::new();
        self.content(now, co, face, &mut out);
        out
    }

    pub fn on_nack(&mut self, now: f64, nack: Nack, _face: Face) -> Vec<FwdOut> {
        let mut out = Vec::new();
        let Some(entry) = self.pit.take(now, &nack.name) else { return out };
        for f in entry.faces {
            if f == Face::Internal {
                self.cert_failed(now, &nack.name, &mut out);
            } else {
                out.push(FwdOut::Send(f, Packet::Nack(nack.clone())));
            }
        }
        out
    }

    fn interest(&mut self, now: f64, interest: Interest, face: Face, out: &mut Vec<FwdOut>) {
        self.stats.interests_in += 1;
        if let Some(g) = self.guard.as_mut() {
            if face != Face::App && InterestGuard::applies(&interest.name) {
                let payload = Interest::signed_payload(interest.nonce);
                match g.validator.check(PacketKind::TileInterest, &interest.name, &payload, interest.signature.as_ref()) {
                    CheckOutcome::Accept => {}
                    CheckOutcome::Reject(r) => {
                        log::debug!("interest {} rejected: {r}", interest.name);
                        self.stats.rejected += 1;
                        return;
                    }
                    CheckOutcome::NeedCert(id) => {
                        let first = g.fetching.insert(id.clone());
                        g.stash.push((interest, face, id.clone()));
                        if first {
                            let nonce = self.next_nonce();
                            self.interest(now, Interest::new(cert_repo_name(&id), nonce), Face::Internal, out);
                        }
                        return;
                    }
                }
            }
        }
        if let Some(co) = self.cs.get(&interest.name, now) {
            self.stats.cs_hits += 1;
            if face == Face::Internal {
                self.cert_arrived(now, &co, out);
            } else {
                out.push(FwdOut::Send(face, Packet::Content(co)));
            }
            return;
        }
        let Some(next) = self.fib.lookup(&interest.name).map(|e| e.next_hop) else {
            self.stats.no_route += 1;
            out.push(FwdOut::Send(face, Packet::Nack(Nack { name: interest.name, nonce: interest.nonce, reason: NackReason::NoRoute })));
            return;
        };
        if next == face {
            return;
        }
        let lifetime = interest.lifetime_ms.unwrap_or(DEFAULT_LIFETIME_MS);
        let expires = if lifetime == u64::MAX { None } else { Some(now + lifetime as f64) };
        match self.pit.insert(now, &interest.name, face, interest.nonce, expires, next) {
            PitInsert::New => {
                if next == Face::App {
                    self.stats.to_app += 1;
                } else {
                    self.stats.forwarded += 1;
                }
                out.push(FwdOut::Send(next, Packet::Interest(interest)));
            }
            PitInsert::Aggregated => self.stats.pit_aggregated += 1,
            PitInsert::Duplicate => {}
        }
    }

    fn content(&mut self, now: f64, co: ContentObject, _face: Face, out: &mut Vec<FwdOut>) {
        let Some(entry) = self.pit.take(now, &co.name) else {
            self.stats.unsolicited += 1;
            return;
        };
        self.cs.insert(co.clone(), now);
        for f in entry.faces {
            if f == Face::Internal {
                self.cert_arrived(now, &co, out);
            } else {
                out.push(FwdOut::Send(f, Packet::Content(co.clone())));
            }
        }
    }

    fn cert_arrived(&mut self, now: f64, co: &ContentObject, out: &mut Vec<FwdOut>) {
        let Some(id) = identity_from_repo_name(&co.name) else { return };
        match serde_json::from_slice::<Certificate>(&co.payload) {
            Ok(cert) if cert.identity == id => {
                if let Some(g) = self.guard.as_mut() {
                    g.validator.add_certificate(cert);
                }
                self.release(now, &id, true, out);
            }
            _ => self.release(now, &id, false, out),
        }
    }

    fn cert_failed(&mut self, now: f64, name: &Name, out: &mut Vec<FwdOut>) {
        if let Some(id) = identity_from_repo_name(name) {
            self.release(now, &id, false, out);
        }
    }

    /// Re-runs (or drops) interests that waited for `id`.
    fn release(&mut self, now: f64, id: &Name, ok: bool, out: &mut Vec<FwdOut>) {
        let Some(g) = self.guard.as_mut() else { return };
        g.fetching.remove(id);
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut g.stash).into_iter().partition(|(_, _, need)| need == id);
        g.stash = waiting;
        for (interest, face, _) in ready {
            if ok {
                // Counted once on arrival already.
                self.stats.interests_in -= 1;
                self.interest(now, interest, face, out);
            } else {
                self.stats.rejected += 1;
            }
        }
    }

    fn next_nonce(&mut self) -> u64 {
        self.nonce_counter += 1;
        self.nonce_base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.nonce_counter
    }

    /// Drops pending entries that wait on the local application.
    pub fn forget_app_interests(&mut self) {
        self.pit.retain(|_, e| e.upstream != Face::App);
    }
}
