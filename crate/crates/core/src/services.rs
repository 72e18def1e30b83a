//! System services: the global filter server and the certificate repository.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::bloom::{parse_topic_name, topic_name, BfServerState, BloomParams, CbfDigest, PublicationBatch};
use crate::engine::Engine;
use crate::icn::packet::{ContentObject, Interest};
use crate::icn::{App, Handled, Nack, Packet};
use crate::naming::Name;
use crate::trust::{cert_repo_name, cert_repo_prefix, engine_identity, identity_from_repo_name, CertRepository, Certificate, CheckOutcome, Validator};
use crate::wire::Frame;

pub const CERT_FRESHNESS_MS: u64 = 3_600_000;

/// Subscription interests stay in the PIT until answered.
pub const SUBSCRIPTION_LIFETIME_MS: u64 = u64::MAX;

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct BfServerStats {
    pub queries: u64,
    #[serde(rename = "prefixesChecked")]
    pub prefixes_checked: u64,
    pub batches: u64,
    pub publications: u64,
    #[serde(rename = "droppedStale")]
    pub dropped_stale: u64,
    #[serde(rename = "rejectedBatches")]
    pub rejected_batches: u64,
    #[serde(rename = "onesBits")]
    pub ones: usize,
}

/// Keeps the OR of all engines' filters, fed by their topic publications.
pub struct BfServer {
    state: BfServerState,
    validator: Option<Arc<Validator>>,
    /// Batch number awaited from each subscribed engine.
    next: BTreeMap<String, u64>,
    /// Batches waiting for the signing engine's certificate.
    stashed: HashMap<Name, Vec<ContentObject>>,
    nonce: u64,
    pub stats: BfServerStats,
}

impl BfServer {
    pub fn new(params: BloomParams, engines: Vec<String>, validator: Option<Arc<Validator>>) -> Self {
        BfServer {
            state: BfServerState::new(params, engines),
            validator,
            next: BTreeMap::new(),
            stashed: HashMap::new(),
            nonce: 0,
            stats: BfServerStats::default(),
        }
    }

    pub fn state(&self) -> &BfServerState {
        &self.state
    }

    pub fn subscribed(&self, engine: &str) -> Option<u64> {
        self.next.get(engine).copied()
    }

    fn subscribe(&mut self, engine: &str, batch: u64) -> Packet {
        self.next.insert(engine.to_string(), batch);
        self.nonce += 1;
        let mut i = Interest::new(topic_name(engine, batch), crate::bloom::fnv1a(self.nonce, engine.as_bytes()));
        i.lifetime_ms = Some(SUBSCRIPTION_LIFETIME_MS);
        Packet::Interest(i)
    }

    /// Replaces an engine's state with its digest and resubscribes from the
    /// digest's next batch.
    pub fn resync(&mut self, digest: &CbfDigest) -> Handled {
        self.state.apply_digest(digest);
        if self.state.engine_ids().all(|e| e != &digest.engine_id) {
            return Handled::none();
        }
        Handled::packets(vec![self.subscribe(&digest.engine_id.clone(), digest.next_batch)])
    }

    fn batch_arrived(&mut self, engine: String, batch: u64, co: &ContentObject) -> Vec<Packet> {
        if self.next.get(&engine) != Some(&batch) {
            self.stats.dropped_stale += 1;
            return Vec::new();
        }
        let signer = engine_identity(&engine);
        if let Some(v) = &self.validator {
            match v.check_signed_by(&signer, &co.name, &co.payload, co.signature.as_ref()) {
                CheckOutcome::Accept => {}
                CheckOutcome::NeedCert(id) => {
                    let first = !self.stashed.contains_key(&id);
                    self.stashed.entry(id.clone()).or_default().push(co.clone());
                    if !first {
                        return Vec::new();
                    }
                    self.nonce += 1;
                    return vec![Packet::Interest(Interest::new(cert_repo_name(&id), self.nonce))];
                }
                CheckOutcome::Reject(r) => {
                    log::warn!("bf server: batch {} rejected: {r}", co.name);
                    self.stats.rejected_batches += 1;
                    return vec![self.subscribe(&engine, batch + 1)];
                }
            }
        }
        match serde_json::from_slice::<PublicationBatch>(&co.payload) {
            Ok(b) => {
                self.stats.batches += 1;
                for p in &b.publications {
                    if p.engine_id == engine && self.state.apply(p) {
                        self.stats.publications += 1;
                    }
                }
            }
            Err(e) => {
                log::warn!("bf server: malformed batch {}: {e}", co.name);
                self.stats.rejected_batches += 1;
            }
        }
        vec![self.subscribe(&engine, batch + 1)]
    }

    fn cert_arrived(&mut self, id: Name, cert: Option<Certificate>) -> Vec<Packet> {
        let stashed = self.stashed.remove(&id).unwrap_or_default();
        match (cert, &self.validator) {
            (Some(c), Some(v)) if c.identity == id => v.add_certificate(c),
            _ => {
                self.stats.rejected_batches += stashed.len() as u64;
                return Vec::new();
            }
        }
        let mut out = Vec::new();
        for co in stashed {
            if let Some((engine, batch)) = parse_topic_name(&co.name) {
                out.extend(self.batch_arrived(engine, batch, &co));
            }
        }
        out
    }
}

impl App for BfServer {
    fn on_interest(&mut self, _now: f64, interest: &Interest) -> Handled {
        Engine::nack(interest)
    }

    fn on_content(&mut self, _now: f64, co: &ContentObject) -> Handled {
        if let Some((engine, batch)) = parse_topic_name(&co.name) {
            return Handled::packets(self.batch_arrived(engine, batch, co));
        }
        if let Some(id) = identity_from_repo_name(&co.name) {
            let cert = serde_json::from_slice(&co.payload).ok();
            return Handled::packets(self.cert_arrived(id, cert));
        }
        Handled::none()
    }

    fn on_nack(&mut self, _now: f64, nack: &Nack) -> Handled {
        if let Some((engine, batch)) = parse_topic_name(&nack.name) {
            // The engine went away; a digest resync resubscribes it.
            if self.next.get(&engine) == Some(&batch) {
                self.next.remove(&engine);
            }
        } else if let Some(id) = identity_from_repo_name(&nack.name) {
            return Handled::packets(self.cert_arrived(id, None));
        }
        Handled::none()
    }

    fn on_direct(&mut self, _now: f64, _token: u64, msg: Frame) -> Handled {
        match msg {
            Frame::BfQuery { prefixes } => {
                self.stats.queries += 1;
                self.stats.prefixes_checked += prefixes.len() as u64;
                Handled::reply(Frame::BfReply { bits: self.state.batch_membership(&prefixes) })
            }
            Frame::Digest { digest } => {
                let mut h = self.resync(&digest);
                h.reply = Some(Frame::Ok);
                h
            }
            Frame::Stats => {
                let mut s = self.stats.clone();
                s.dropped_stale += self.state.dropped_stale;
                s.ones = self.state.filter().count_ones();
                Handled::reply(Frame::StatsReply { stats: serde_json::to_value(&s).unwrap_or_default() })
            }
            other => Handled::reply(Frame::Error { message: format!("bf server cannot handle {other:?}") }),
        }
    }

    fn prefixes(&self) -> Vec<Name> {
        Vec::new()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Serves certificates under `ndn:/OGB-SYS/certs`.
pub struct CertRepoApp {
    pub repo: CertRepository,
    pub served: u64,
}

impl CertRepoApp {
    pub fn new(repo: CertRepository) -> Self {
        CertRepoApp { repo, served: 0 }
    }
}

impl CertRepoApp {
    /// Accepts a certificate whose issuer is already published. An identity
    /// keeps its first certificate.
    fn publish(&mut self, cert: Certificate) -> Frame {
        if let Some(have) = self.repo.get(&cert.identity) {
            return if *have == cert { Frame::Ok } else { Frame::Error { message: format!("{} already has a different certificate", cert.identity) } };
        }
        match self.repo.get(&cert.issuer_key_locator) {
            Some(issuer) if cert.issued_by(issuer) => {
                self.repo.publish(cert);
                Frame::Ok
            }
            _ => Frame::Error { message: format!("issuer {} unknown or signature invalid", cert.issuer_key_locator) },
        }
    }
}

impl App for CertRepoApp {
    fn on_interest(&mut self, _now: f64, interest: &Interest) -> Handled {
        let cert = identity_from_repo_name(&interest.name).and_then(|id| self.repo.get(&id));
        match cert {
            Some(c) => {
                self.served += 1;
                let payload = serde_json::to_vec(c).expect("certificate serializes");
                Handled::packets(vec![Packet::Content(ContentObject::new(interest.name.clone(), payload, CERT_FRESHNESS_MS))])
            }
            None => Engine::nack(interest),
        }
    }

    fn on_direct(&mut self, _now: f64, _token: u64, msg: Frame) -> Handled {
        match msg {
            Frame::Stats => Handled::reply(Frame::StatsReply { stats: serde_json::json!({"certificates": self.repo.len(), "served": self.served}) }),
            Frame::PublishCert { cert } => Handled::reply(self.publish(cert)),
            _ => Handled::reply(Frame::Error { message: "certificate repository cannot handle this request".into() }),
        }
    }

    fn prefixes(&self) -> Vec<Name> {
        vec![cert_repo_prefix()]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
