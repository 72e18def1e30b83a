//! Global Bloom filter over not-void tile-prefixes and the per-engine
//! counting filters that feed it.
//!
//! Every engine keeps a counting filter with the same buckets as the global
//! one. A bucket crossing 0 -> 1 or 1 -> 0 produces a publication; the server
//! keeps one bit per (engine, bucket) and ORs them into the global filter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::naming::Name;
use crate::trust::SYS_ROOT;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SEED_1: u64 = 0x5851_f42d_4c95_7f2d;
const SEED_2: u64 = 0x1405_7b7e_f767_814f;

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET ^ seed, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BloomParams {
    pub m: usize,
    pub h: u32,
}

impl Default for BloomParams {
    fn default() -> Self {
        BloomParams { m: 1 << 20, h: 7 }
    }
}

impl BloomParams {
    /// Bucket indices of `key`: `(h1 + i * h2) mod m` for `i < h`.
    pub fn indices(&self, key: &str) -> impl Iterator<Item = usize> {
        let h1 = fnv1a(SEED_1, key.as_bytes());
        let h2 = fnv1a(SEED_2, key.as_bytes()) | 1;
        let m = self.m as u64;
        (0..self.h as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    /// Expected false-positive rate after `n` insertions.
    pub fn theoretical_fpr(&self, n: usize) -> f64 {
        let m = self.m as f64;
        (1.0 - (1.0 - 1.0 / m).powf(self.h as f64 * n as f64)).powi(self.h as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    params: BloomParams,
    bits: Vec<u64>,
}

impl BloomFilter {
    pub fn new(params: BloomParams) -> Self {
        BloomFilter { params, bits: vec![0; params.m.div_ceil(64)] }
    }

    pub fn params(&self) -> BloomParams {
        self.params
    }

    pub fn insert(&mut self, key: &str) {
        for i in self.params.indices(key) {
            self.set_bit(i, true);
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.indices(key).all(|i| self.bit(i))
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, on: bool) {
        if on {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> Vec<u32> {
        (0..self.params.m).filter(|&i| self.bit(i)).map(|i| i as u32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BfPublication {
    #[serde(rename = "engineId")]
    pub engine_id: String,
    #[serde(rename = "bucketIndex")]
    pub bucket: u32,
    pub direction: Direction,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingBloomFilter {
    params: BloomParams,
    counters: Vec<u32>,
}

impl CountingBloomFilter {
    pub fn new(params: BloomParams) -> Self {
        CountingBloomFilter { params, counters: vec![0; params.m] }
    }

    pub fn params(&self) -> BloomParams {
        self.params
    }

    /// Increments the key's counters; returns buckets that became non-zero.
    pub fn insert_key(&mut self, key: &str) -> Vec<(u32, Direction)> {
        let mut out = Vec::new();
        for i in self.params.indices(key) {
            let c = &mut self.counters[i];
            *c = c.saturating_add(1);
            if *c == 1 {
                out.push((i as u32, Direction::Up));
            }
        }
        out
    }

    /// Decrements the key's counters; returns buckets that became zero.
    /// Counters never go below zero.
    pub fn remove_key(&mut self, key: &str) -> Vec<(u32, Direction)> {
        let mut out = Vec::new();
        for i in self.params.indices(key) {
            let c = &mut self.counters[i];
            if *c > 0 {
                *c -= 1;
                if *c == 0 {
                    out.push((i as u32, Direction::Down));
                }
            }
        }
        out
    }

    pub fn counter(&self, bucket: usize) -> u32 {
        self.counters[bucket]
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.indices(key).all(|i| self.counters[i] > 0)
    }

    /// Non-zero buckets, as sent in a recovery digest.
    pub fn nonzero(&self) -> Vec<u32> {
        self.counters.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, _)| i as u32).collect()
    }
}

/// Full state of one engine's counting filter, for server recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbfDigest {
    #[serde(rename = "engineId")]
    pub engine_id: String,
    pub seq: u64,
    pub buckets: Vec<u32>,
    /// Batch number the engine will publish next.
    #[serde(rename = "nextBatch", default)]
    pub next_batch: u64,
}

/// A set of publications carried by one topic content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationBatch {
    pub publications: Vec<BfPublication>,
}

pub fn topic_prefix() -> Name {
    Name::new([SYS_ROOT, "BF"]).unwrap()
}

pub fn engine_topic(engine_id: &str) -> Name {
    topic_prefix().child(engine_id)
}

/// Name of the `batch`-th publication batch of `engine_id`.
pub fn topic_name(engine_id: &str, batch: u64) -> Name {
    engine_topic(engine_id).child(batch.to_string())
}

pub fn parse_topic_name(name: &Name) -> Option<(String, u64)> {
    let p = topic_prefix();
    if !p.is_prefix_of(name) || name.len() != p.len() + 2 {
        return None;
    }
    let c = name.components();
    Some((c[p.len()].clone(), c[p.len() + 1].parse().ok()?))
}

#[derive(Debug, Default, Clone)]
struct EngineBits {
    last_seq: Option<u64>,
    buckets: BTreeSet<u32>,
}

/// Global filter state assembled from engine publications.
#[derive(Debug, Clone)]
pub struct BfServerState {
    filter: BloomFilter,
    holders: Vec<u16>,
    engines: BTreeMap<String, EngineBits>,
    pub dropped_stale: u64,
    pub ignored_unknown: u64,
}

impl BfServerState {
    pub fn new<I: IntoIterator<Item = String>>(params: BloomParams, engines: I) -> Self {
        BfServerState {
            filter: BloomFilter::new(params),
            holders: vec![0; params.m],
            engines: engines.into_iter().map(|e| (e, EngineBits::default())).collect(),
            dropped_stale: 0,
            ignored_unknown: 0,
        }
    }

    pub fn params(&self) -> BloomParams {
        self.filter.params()
    }

    pub fn engine_ids(&self) -> impl Iterator<Item = &String> {
        self.engines.keys()
    }

    fn set_engine_bit(&mut self, engine: &str, bucket: u32, on: bool) {
        let Some(bits) = self.engines.get_mut(engine) else { return };
        let b = bucket as usize;
        let changed = if on { bits.buckets.insert(bucket) } else { bits.buckets.remove(&bucket) };
        if !changed {
            return;
        }
        if on {
            self.holders[b] += 1;
            if self.holders[b] == 1 {
                self.filter.set_bit(b, true);
            }
        } else {
            self.holders[b] -= 1;
            if self.holders[b] == 0 {
                self.filter.set_bit(b, false);
            }
        }
    }

    /// Applies one publication. Returns false when it was ignored.
    pub fn apply(&mut self, p: &BfPublication) -> bool {
        let Some(bits) = self.engines.get_mut(&p.engine_id) else {
            log::warn!("publication from unknown engine {}", p.engine_id);
            self.ignored_unknown += 1;
            return false;
        };
        if bits.last_seq.is_some_and(|s| p.seq <= s) {
            self.dropped_stale += 1;
            return false;
        }
        bits.last_seq = Some(p.seq);
        if p.bucket as usize >= self.holders.len() {
            return false;
        }
        self.set_engine_bit(&p.engine_id, p.bucket, p.direction == Direction::Up);
        true
    }

    /// Replaces an engine's bits with a full digest.
    pub fn apply_digest(&mut self, d: &CbfDigest) {
        let Some(bits) = self.engines.get(&d.engine_id) else {
            log::warn!("digest from unknown engine {}", d.engine_id);
            self.ignored_unknown += 1;
            return;
        };
        let old: Vec<u32> = bits.buckets.iter().copied().collect();
        for b in old {
            self.set_engine_bit(&d.engine_id, b, false);
        }
        for &b in &d.buckets {
            if (b as usize) < self.holders.len() {
                self.set_engine_bit(&d.engine_id, b, true);
            }
        }
        if let Some(bits) = self.engines.get_mut(&d.engine_id) {
            bits.last_seq = Some(d.seq);
        }
    }

    pub fn contains(&self, prefix: &str) -> bool {
        self.filter.contains(prefix)
    }

    pub fn batch_membership<S: AsRef<str>>(&self, prefixes: &[S]) -> Vec<bool> {
        prefixes.iter().map(|p| self.contains(p.as_ref())).collect()
    }

    pub fn filter(&self) -> &BloomFilter {
        &self.filter
    }

    /// Bits held for `engine`.
    pub fn engine_buckets(&self, engine: &str) -> Option<&BTreeSet<u32>> {
        self.engines.get(engine).map(|e| &e.buckets)
    }

    pub fn last_seq(&self, engine: &str) -> Option<u64> {
        self.engines.get(engine).and_then(|e| e.last_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BloomParams {
        BloomParams { m: 1024, h: 4 }
    }

    fn publish(engine: &str, seq: &mut u64, transitions: Vec<(u32, Direction)>) -> Vec<BfPublication> {
        transitions
            .into_iter()
            .map(|(bucket, direction)| {
                *seq += 1;
                BfPublication { engine_id: engine.into(), bucket, direction, seq: *seq }
            })
            .collect()
    }

    #[test]
    fn indices_are_deterministic() {
        let p = BloomParams::default();
        let a: Vec<usize> = p.indices("ndn:/OGB/12/41/58/19/GPS-ID").collect();
        let b: Vec<usize> = p.indices("ndn:/OGB/12/41/58/19/GPS-ID").collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|&i| i < p.m));
        // FNV-1a reference value for the empty input with no seed.
        assert_eq!(fnv1a(0, b""), FNV_OFFSET);
        assert_eq!(fnv1a(0, b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn first_key_publishes_h_ups() {
        let mut cbf = CountingBloomFilter::new(BloomParams::default());
        let key = "ndn:/OGB/1/2/GPS-ID";
        let distinct: BTreeSet<usize> = cbf.params().indices(key).collect();
        let ups = cbf.insert_key(key);
        assert_eq!(ups.len(), distinct.len());
        assert!(ups.iter().all(|(_, d)| *d == Direction::Up));
        assert!(cbf.insert_key(key).is_empty());
    }

    #[test]
    fn remove_then_reinsert_mirrors() {
        let mut cbf = CountingBloomFilter::new(small());
        let ups = cbf.insert_key("k");
        let downs = cbf.remove_key("k");
        let up_buckets: Vec<u32> = ups.iter().map(|t| t.0).collect();
        let down_buckets: Vec<u32> = downs.iter().map(|t| t.0).collect();
        assert_eq!(up_buckets, down_buckets);
        assert!(downs.iter().all(|(_, d)| *d == Direction::Down));
        assert_eq!(cbf.insert_key("k"), ups);
        // Removing an absent key never underflows.
        let mut empty = CountingBloomFilter::new(small());
        assert!(empty.remove_key("k").is_empty());
        assert_eq!(empty.nonzero(), Vec::<u32>::new());
    }

    #[test]
    fn or_combination() {
        let mut server = BfServerState::new(small(), ["A".to_string(), "B".to_string()]);
        let pa = BfPublication { engine_id: "A".into(), bucket: 7, direction: Direction::Up, seq: 1 };
        let pb = BfPublication { engine_id: "B".into(), bucket: 7, direction: Direction::Up, seq: 1 };
        server.apply(&pa);
        server.apply(&pb);
        assert!(server.filter().bit(7));
        server.apply(&BfPublication { engine_id: "A".into(), bucket: 7, direction: Direction::Down, seq: 2 });
        assert!(server.filter().bit(7));
        let b_down = BfPublication { engine_id: "B".into(), bucket: 7, direction: Direction::Down, seq: 2 };
        server.apply(&b_down);
        assert!(!server.filter().bit(7));
        // Re-delivery is dropped and leaves the state unchanged.
        assert!(!server.apply(&b_down));
        assert!(!server.filter().bit(7));
        assert!(!server.apply(&BfPublication { engine_id: "Z".into(), bucket: 1, direction: Direction::Up, seq: 1 }));
        assert_eq!(server.ignored_unknown, 1);
    }

    #[test]
    fn digest_rebuild_matches_publications() {
        let params = small();
        let mut a = CountingBloomFilter::new(params);
        let mut b = CountingBloomFilter::new(params);
        let mut live = BfServerState::new(params, ["A".to_string(), "B".to_string()]);
        let (mut sa, mut sb) = (0, 0);
        for i in 0..50 {
            for p in publish("A", &mut sa, a.insert_key(&format!("a{i}"))) {
                live.apply(&p);
            }
            for p in publish("B", &mut sb, b.insert_key(&format!("b{i}"))) {
                live.apply(&p);
            }
        }
        for i in 0..20 {
            for p in publish("A", &mut sa, a.remove_key(&format!("a{i}"))) {
                live.apply(&p);
            }
        }
        let mut rebuilt = BfServerState::new(params, ["A".to_string(), "B".to_string()]);
        rebuilt.apply_digest(&CbfDigest { engine_id: "A".into(), seq: sa, buckets: a.nonzero(), next_batch: 0 });
        rebuilt.apply_digest(&CbfDigest { engine_id: "B".into(), seq: sb, buckets: b.nonzero(), next_batch: 0 });
        assert_eq!(rebuilt.filter(), live.filter());
        let union: BTreeSet<u32> = a.nonzero().into_iter().chain(b.nonzero()).collect();
        assert_eq!(live.filter().ones(), union.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn empty_filter_reports_nothing() {
        let s = BfServerState::new(BloomParams::default(), ["A".to_string()]);
        assert_eq!(s.batch_membership(&["x", "y"]), vec![false, false]);
    }

    #[test]
    fn topic_names() {
        let n = topic_name("e1", 4);
        assert_eq!(n.to_string(), "ndn:/OGB-SYS/BF/e1/4");
        assert_eq!(parse_topic_name(&n), Some(("e1".into(), 4)));
    }
}
