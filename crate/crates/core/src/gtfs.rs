//! Transit feed ingestion: the stops of one feed become a single MultiPoint.
//!
//! Only `stops.txt` is read. The source may be a feed directory, the
//! `stops.txt` file itself, or a `.zip` archive holding it.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::geodata::{GeoError, GeoFeature};
use crate::grid::{GeoPoint, Geometry};

#[derive(Debug, thiserror::Error)]
pub enum GtfsError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("archive error: {0}")]
    Archive(String),
    #[error("stops.txt: {0}")]
    Csv(String),
    #[error("stops.txt lacks column {0}")]
    MissingColumn(&'static str),
    #[error("feed has no stop with valid coordinates")]
    EmptyFeed,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// A feed on disk plus the public URL it was published under.
#[derive(Debug, Clone)]
pub struct GtfsFeed {
    pub source: PathBuf,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStop {
    pub row: usize,
    #[serde(rename = "stopId")]
    pub stop_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub feature: GeoFeature,
    pub stops: usize,
    pub warnings: Vec<SkippedStop>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GtfsError + '_ {
    move |source| GtfsError::Io { path: path.to_path_buf(), source }
}

fn read_stops(source: &Path) -> Result<Vec<u8>, GtfsError> {
    if source.is_dir() {
        let p = source.join("stops.txt");
        return std::fs::read(&p).map_err(io_err(&p));
    }
    let is_zip = source.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"));
    if !is_zip {
        return std::fs::read(source).map_err(io_err(source));
    }
    let file = std::fs::File::open(source).map_err(io_err(source))?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| GtfsError::Archive(e.to_string()))?;
    // Some publishers nest the feed one directory deep.
    let entry = (0..archive.len())
        .find(|&i| archive.name_for_index(i).is_some_and(|n| n == "stops.txt" || n.ends_with("/stops.txt")))
        .ok_or_else(|| GtfsError::Archive("no stops.txt in archive".into()))?;
    let mut buf = Vec::new();
    archive
        .by_index(entry)
        .map_err(|e| GtfsError::Archive(e.to_string()))?
        .read_to_end(&mut buf)
        .map_err(io_err(source))?;
    Ok(buf)
}

/// Parses stop positions, skipping rows without usable coordinates.
pub fn parse_stops(bytes: &[u8]) -> Result<(Vec<GeoPoint>, Vec<SkippedStop>), GtfsError> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(bytes);
    let headers = rdr.headers().map_err(|e| GtfsError::Csv(e.to_string()))?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name).ok_or(GtfsError::MissingColumn(name));
    let (lat_i, lon_i) = (col("stop_lat")?, col("stop_lon")?);
    let id_i = headers.iter().position(|h| h == "stop_id");

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let row = n + 2;
        let rec = rec.map_err(|e| GtfsError::Csv(e.to_string()))?;
        let stop_id = id_i.and_then(|i| rec.get(i)).unwrap_or("").to_string();
        let field = |i: usize| rec.get(i).unwrap_or("");
        let (lat, lon) = (field(lat_i), field(lon_i));
        let reason = if lat.is_empty() || lon.is_empty() {
            Some("missing coordinates".to_string())
        } else {
            match (lat.parse::<f64>(), lon.parse::<f64>()) {
                (Ok(lat), Ok(lng)) => match GeoPoint::new(lng, lat) {
                    Ok(p) => {
                        points.push(p);
                        None
                    }
                    Err(e) => Some(e.to_string()),
                },
                _ => Some(format!("unparseable coordinates {lat:?},{lon:?}")),
            }
        };
        if let Some(reason) = reason {
            skipped.push(SkippedStop { row, stop_id, reason });
        }
    }
    Ok((points, skipped))
}

/// Feed-derived object id: stable for identical content, distinct across feeds.
fn feed_oid(url: &str, points: &[GeoPoint]) -> String {
    let mut h = Sha256::new();
    h.update(url.as_bytes());
    for p in points {
        h.update(p.lng.to_le_bytes());
        h.update(p.lat.to_le_bytes());
    }
    let d = h.finalize();
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ingest_gtfs(feed: &GtfsFeed, tid: &str, cid: &str, uid: &str) -> Result<Ingested, GtfsError> {
    let (points, warnings) = parse_stops(&read_stops(&feed.source)?)?;
    if points.is_empty() {
        return Err(GtfsError::EmptyFeed);
    }
    let mut props = Map::new();
    props.insert("oid".into(), Value::String(format!("gtfs{}", feed_oid(&feed.url, &points))));
    props.insert("tid".into(), tid.into());
    props.insert("cid".into(), cid.into());
    props.insert("uid".into(), uid.into());
    props.insert("URL".into(), feed.url.clone().into());
    let stops = points.len();
    let feature = GeoFeature::new(Geometry::MultiPoint(points), props)?;
    Ok(Ingested { feature, stops, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const STOPS: &str = "stop_id,stop_name,stop_lat,stop_lon\n\
        S1,Termini,41.9010,12.5016\n\
        S2,Colosseo,41.8902,12.4922\n\
        S3,Blank,,12.49\n\
        S4,Piramide,41.8764,12.4810\n\
        S5,Dup,41.8764,12.4810\n";

    #[test]
    fn skips_blank_and_keeps_duplicates() {
        let (pts, skipped) = parse_stops(STOPS.as_bytes()).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[2], pts[3]);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].stop_id, "S3");
        assert_eq!(skipped[0].row, 4);
    }

    #[test]
    fn bad_numbers_and_range() {
        let (pts, skipped) = parse_stops(b"stop_lat,stop_lon,stop_id\nabc,1,a\n95,1,b\n1,2,c\n").unwrap();
        assert_eq!(pts, vec![GeoPoint { lng: 2.0, lat: 1.0 }]);
        assert_eq!(skipped.len(), 2);
    }

    #[test]
    fn missing_column() {
        assert!(matches!(parse_stops(b"stop_id,stop_lat\n1,2\n"), Err(GtfsError::MissingColumn("stop_lon"))));
    }

    #[test]
    fn directory_and_zip_sources() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stops.txt"), STOPS).unwrap();
        let url = "https://example.org/rome.zip";
        let a = ingest_gtfs(&GtfsFeed { source: dir.path().into(), url: url.into() }, "Foo", "Transit", "Alice").unwrap();
        assert_eq!(a.stops, 4);
        assert_eq!(a.feature.properties["URL"], url);
        assert!(matches!(a.feature.geometry, Geometry::MultiPoint(ref p) if p.len() == 4));

        let zpath = dir.path().join("feed.zip");
        let mut w = zip::ZipWriter::new(std::fs::File::create(&zpath).unwrap());
        w.start_file("feed/stops.txt", zip::write::SimpleFileOptions::default()).unwrap();
        std::io::Write::write_all(&mut w, STOPS.as_bytes()).unwrap();
        w.finish().unwrap();
        let b = ingest_gtfs(&GtfsFeed { source: zpath, url: url.into() }, "Foo", "Transit", "Alice").unwrap();
        assert_eq!(a.feature, b.feature);
    }

    #[test]
    fn empty_feed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stops.txt"), "stop_id,stop_lat,stop_lon\nx,,\n").unwrap();
        let feed = GtfsFeed { source: dir.path().into(), url: "u".into() };
        assert!(matches!(ingest_gtfs(&feed, "Foo", "T", "A"), Err(GtfsError::EmptyFeed)));
    }
}
