//! CO table and per-level tile tables, persisted as an append log plus a
//! snapshot written on shutdown.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geodata::OgbData;
use crate::grid::MAX_LEVEL;
use crate::icn::packet::ContentObject;
use crate::naming::{DataName, Name, TileName};

pub const LOG_FILE: &str = "log.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

const LEVELS: usize = MAX_LEVEL as usize + 1;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    /// Last publication sequence number issued.
    #[serde(rename = "pubSeq")]
    pub pub_seq: u64,
    /// Next publication batch number.
    pub batch: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
enum LogRecord {
    Put { content: ContentObject },
    Del { name: Name },
    Meta { meta: StoreMeta },
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    meta: StoreMeta,
    contents: Vec<ContentObject>,
}

#[derive(Debug)]
pub struct Store {
    dir: Option<PathBuf>,
    co: HashMap<Name, OgbData>,
    tiles: [BTreeSet<Name>; LEVELS],
    access: [u64; LEVELS],
    meta: StoreMeta,
    log: Option<BufWriter<File>>,
}

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

impl Store {
    pub fn in_memory() -> Self {
        Store { dir: None, co: HashMap::new(), tiles: Default::default(), access: [0; LEVELS], meta: StoreMeta::default(), log: None }
    }

    /// Opens (or creates) a store under `dir`, replaying snapshot then log.
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut s = Store::in_memory();
        let snap = dir.join(SNAPSHOT_FILE);
        if snap.exists() {
            let snapshot: Snapshot = serde_json::from_reader(BufReader::new(File::open(&snap)?)).map_err(invalid)?;
            s.meta = snapshot.meta;
            for co in snapshot.contents {
                s.apply_put(OgbData::from_content(&co).map_err(invalid)?);
            }
        }
        let log = dir.join(LOG_FILE);
        if log.exists() {
            for line in BufReader::new(File::open(&log)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a crash is ignored.
                let Ok(rec) = serde_json::from_str::<LogRecord>(&line) else {
                    log::warn!("skipping unreadable log line in {}", log.display());
                    continue;
                };
                match rec {
                    LogRecord::Put { content } => {
                        s.apply_put(OgbData::from_content(&content).map_err(invalid)?);
                    }
                    LogRecord::Del { name } => {
                        s.apply_del(&name);
                    }
                    LogRecord::Meta { meta } => s.meta = meta,
                }
            }
        }
        s.log = Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(&log)?));
        s.dir = Some(dir.to_path_buf());
        Ok(s)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn append(&mut self, rec: &LogRecord) -> io::Result<()> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, rec).map_err(invalid)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn apply_put(&mut self, d: OgbData) -> bool {
        let name = d.name.to_name();
        self.tiles[d.name.tile.level() as usize].insert(name.clone());
        self.co.insert(name, d).is_some()
    }

    fn apply_del(&mut self, name: &Name) -> Option<OgbData> {
        let d = self.co.remove(name)?;
        self.tiles[d.name.tile.level() as usize].remove(name);
        Some(d)
    }

    /// Inserts or replaces an entry. Returns true when it replaced one.
    pub fn put(&mut self, d: OgbData) -> io::Result<bool> {
        self.append(&LogRecord::Put { content: d.to_content() })?;
        Ok(self.apply_put(d))
    }

    pub fn delete(&mut self, name: &DataName) -> io::Result<Option<OgbData>> {
        let n = name.to_name();
        if !self.co.contains_key(&n) {
            return Ok(None);
        }
        self.append(&LogRecord::Del { name: n.clone() })?;
        Ok(self.apply_del(&n))
    }

    pub fn get(&self, name: &Name) -> Option<&OgbData> {
        self.co.get(name)
    }

    pub fn meta(&self) -> StoreMeta {
        self.meta
    }

    pub fn set_meta(&mut self, meta: StoreMeta) -> io::Result<()> {
        if meta != self.meta {
            self.append(&LogRecord::Meta { meta })?;
            self.meta = meta;
        }
        Ok(())
    }

    /// Flushes buffered log records.
    pub fn commit(&mut self) -> io::Result<()> {
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Entries selected by a tile query, scanning only that level's table.
    pub fn tile_query(&mut self, tile: &TileName) -> Vec<&OgbData> {
        let level = tile.tile.level() as usize;
        self.access[level] += 1;
        let prefix = tile.data_prefix();
        self.tiles[level]
            .range(prefix.clone()..)
            .take_while(|n| prefix.is_prefix_of(n))
            .filter_map(|n| self.co.get(n))
            .collect()
    }

    pub fn level_accesses(&self) -> [u64; LEVELS] {
        self.access
    }

    pub fn len(&self) -> usize {
        self.co.len()
    }

    pub fn is_empty(&self) -> bool {
        self.co.is_empty()
    }

    pub fn level_len(&self, level: u8) -> usize {
        self.tiles[level as usize].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &OgbData> {
        self.co.values()
    }

    /// Checks that the tile tables index exactly the CO table.
    pub fn check_coherence(&self) -> Result<(), String> {
        let indexed: usize = self.tiles.iter().map(|t| t.len()).sum();
        if indexed != self.co.len() {
            return Err(format!("{indexed} indexed rows for {} objects", self.co.len()));
        }
        for (level, table) in self.tiles.iter().enumerate() {
            for n in table {
                match self.co.get(n) {
                    Some(d) if d.name.tile.level() as usize == level => {}
                    Some(_) => return Err(format!("{n} indexed at the wrong level")),
                    None => return Err(format!("{n} indexed but not stored")),
                }
            }
        }
        Ok(())
    }

    /// Writes a snapshot and truncates the log.
    pub fn snapshot(&mut self) -> io::Result<()> {
        let Some(dir) = self.dir.clone() else { return Ok(()) };
        self.commit()?;
        let mut contents: Vec<ContentObject> = self.co.values().map(|d| d.to_content()).collect();
        contents.sort_by(|a, b| a.name.cmp(&b.name));
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, &Snapshot { meta: self.meta, contents }).map_err(invalid)?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        self.log = Some(BufWriter::new(File::create(dir.join(LOG_FILE))?));
        Ok(())
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.commit();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{fixtures, make_ogb_data_set, parse_feature};

    fn items() -> Vec<OgbData> {
        make_ogb_data_set(&parse_feature(fixtures::STARBUCKS.as_bytes()).unwrap(), 1000).unwrap()
    }

    #[test]
    fn tables_follow_levels() {
        let mut s = Store::in_memory();
        for d in items() {
            s.put(d).unwrap();
        }
        assert_eq!(s.len(), 3);
        assert_eq!([s.level_len(0), s.level_len(1), s.level_len(2)], [1, 1, 1]);
        s.check_coherence().unwrap();
        let l2 = items().into_iter().find(|d| d.name.tile.level() == 2).unwrap();
        let tn = TileName::new(l2.name.tile.clone(), "Foo", "ShopApp").unwrap();
        assert_eq!(s.tile_query(&tn).len(), 1);
        assert_eq!(s.level_accesses(), [0, 0, 1]);
        let other = TileName::new(l2.name.tile.clone(), "Foo", "Other").unwrap();
        assert!(s.tile_query(&other).is_empty());
    }

    #[test]
    fn log_and_snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let all = items();
        {
            let mut s = Store::open(dir.path()).unwrap();
            for d in all.clone() {
                s.put(d).unwrap();
            }
            s.delete(&all[0].name).unwrap();
            s.set_meta(StoreMeta { pub_seq: 9, batch: 2 }).unwrap();
        }
        let reopened = |p: &Path| {
            let s = Store::open(p).unwrap();
            let mut names: Vec<Name> = s.iter().map(|d| d.name.to_name()).collect();
            names.sort();
            (names, s.meta())
        };
        let (names, meta) = reopened(dir.path());
        assert_eq!(names.len(), 2);
        assert_eq!(meta, StoreMeta { pub_seq: 9, batch: 2 });
        let before = fs::read(dir.path().join(LOG_FILE)).unwrap();
        assert!(!before.is_empty());
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.snapshot().unwrap();
        }
        assert!(fs::read(dir.path().join(LOG_FILE)).unwrap().is_empty());
        assert_eq!(reopened(dir.path()), (names, meta));
        let s = Store::open(dir.path()).unwrap();
        let d = s.get(&all[1].name.to_name()).unwrap();
        assert_eq!(d.to_content(), all[1].to_content());
    }
}
