//! Forwarding tables: FIB, pending interests and the content store.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::packet::ContentObject;
use super::Face;
use crate::naming::Name;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FibEntry {
    pub prefix: Name,
    pub next_hop: Face,
    /// Node that announced the prefix.
    pub origin: usize,
}

#[derive(Debug, Default, Clone)]
pub struct Fib {
    entries: HashMap<Name, FibEntry>,
    longest: usize,
}

impl Fib {
    pub fn insert(&mut self, entry: FibEntry) {
        self.longest = self.longest.max(entry.prefix.len());
        self.entries.insert(entry.prefix.clone(), entry);
    }

    pub fn remove(&mut self, prefix: &Name) -> Option<FibEntry> {
        self.entries.remove(prefix)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.longest = 0;
    }

    /// Longest component-prefix match.
    pub fn lookup(&self, name: &Name) -> Option<&FibEntry> {
        (0..=name.len().min(self.longest)).rev().find_map(|len| self.entries.get(&name.prefix(len)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FibEntry> {
        self.entries.values()
    }
}

#[derive(Debug, Clone)]
pub struct PitEntry {
    pub faces: Vec<Face>,
    nonces: HashSet<u64>,
    /// Absolute expiry in ms; `None` keeps the entry until satisfied.
    pub expires_ms: Option<f64>,
    pub upstream: Face,
}

impl PitEntry {
    fn live(&self, now: f64) -> bool {
        self.expires_ms.is_none_or(|t| t > now)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Pit {
    entries: HashMap<Name, PitEntry>,
}

pub enum PitInsert {
    New,
    Aggregated,
    Duplicate,
}

impl Pit {
    pub fn insert(&mut self, now: f64, name: &Name, face: Face, nonce: u64, expires_ms: Option<f64>, upstream: Face) -> PitInsert {
        if let Some(e) = self.entries.get_mut(name) {
            if e.live(now) {
                if !e.nonces.insert(nonce) {
                    return PitInsert::Duplicate;
                }
                if !e.faces.contains(&face) {
                    e.faces.push(face);
                }
                e.expires_ms = match (e.expires_ms, expires_ms) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
                return PitInsert::Aggregated;
            }
        }
        let entry = PitEntry { faces: vec![face], nonces: HashSet::from([nonce]), expires_ms, upstream };
        self.entries.insert(name.clone(), entry);
        PitInsert::New
    }

    pub fn is_pending(&self, now: f64, name: &Name) -> bool {
        self.entries.get(name).is_some_and(|e| e.live(now))
    }

    /// Removes the entry if it is still live.
    pub fn take(&mut self, now: f64, name: &Name) -> Option<PitEntry> {
        let e = self.entries.remove(name)?;
        e.live(now).then_some(e)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Name, &PitEntry) -> bool) {
        self.entries.retain(|n, e| keep(n, e));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// LRU cache of contents, honouring each object's freshness period.
#[derive(Debug, Clone)]
pub struct ContentStore {
    capacity: usize,
    entries: HashMap<Name, (ContentObject, f64, u64)>,
    order: BTreeMap<u64, Name>,
    tick: u64,
}

impl ContentStore {
    pub fn new(capacity: usize) -> Self {
        ContentStore { capacity, entries: HashMap::new(), order: BTreeMap::new(), tick: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    fn touch(&mut self, name: &Name) {
        self.tick += 1;
        if let Some(e) = self.entries.get_mut(name) {
            self.order.remove(&e.2);
            e.2 = self.tick;
            self.order.insert(self.tick, name.clone());
        }
    }

    pub fn get(&mut self, name: &Name, now: f64) -> Option<ContentObject> {
        let (co, stored, stamp) = self.entries.get(name)?;
        if now - stored >= co.freshness_ms as f64 {
            let stamp = *stamp;
            self.order.remove(&stamp);
            self.entries.remove(name);
            return None;
        }
        let co = co.clone();
        self.touch(name);
        Some(co)
    }

    pub fn contains_fresh(&self, name: &Name, now: f64) -> bool {
        self.entries.get(name).is_some_and(|(co, stored, _)| now - stored < co.freshness_ms as f64)
    }

    pub fn insert(&mut self, co: ContentObject, now: f64) {
        if self.capacity == 0 || co.freshness_ms == 0 {
            return;
        }
        let name = co.name.clone();
        if let Some((_, _, stamp)) = self.entries.remove(&name) {
            self.order.remove(&stamp);
        }
        while self.entries.len() >= self.capacity {
            let Some((_, victim)) = self.order.pop_first() else { break };
            self.entries.remove(&victim);
        }
        self.tick += 1;
        self.order.insert(self.tick, name.clone());
        self.entries.insert(name, (co, now, self.tick));
    }
}
