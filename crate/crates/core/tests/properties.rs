//! Randomized invariants that span modules.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use serde_json::json;

use tilebase::bloom::{BfPublication, BfServerState, BloomParams, CbfDigest, CountingBloomFilter};
use tilebase::cluster::{ClusterConfig, SimCluster};
use tilebase::engine::store::Store;
use tilebase::frontend::RangeQuery;
use tilebase::geodata::{make_ogb_data_set, matches, FilterMode, GeoFeature, OgbBody, OgbData};
use tilebase::grid::{intersected_tiles, tile_contains, TileId};
use tilebase::naming::TileName;
use tilebase::tessellation::constrained_tiles;
use tilebase::{BoundingBox, GeoPoint};

fn feature(oid: usize, pts: &[(f64, f64)], tid: &str, cid: &str) -> GeoFeature {
    let coords: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
    GeoFeature::from_value(&json!({
        "type": "Feature",
        "geometry": {"type": "MultiPoint", "coordinates": coords},
        "properties": {"oid": format!("o{oid}"), "tid": tid, "uid": "Alice", "cid": cid}
    }))
    .unwrap()
}

fn points(region: (f64, f64, f64, f64)) -> impl Strategy<Value = Vec<(f64, f64)>> {
    let (x0, y0, x1, y1) = region;
    prop::collection::vec((x0..x1, y0..y1), 1..5)
}

fn boxes(region: (f64, f64, f64, f64)) -> impl Strategy<Value = BoundingBox> {
    let (x0, y0, x1, y1) = region;
    (x0..x1, y0..y1, 0.001f64..1.5, 0.001f64..1.0).prop_map(move |(x, y, w, h)| BoundingBox::from_coords(x, y, (x + w).min(x1), (y + h).min(y1)).unwrap())
}

const ROME: (f64, f64, f64, f64) = (12.0, 41.0, 14.0, 42.0);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tessellation_covers_and_respects_k(
        (x, y, w, h) in (-20.0f64..20.0, -20.0f64..20.0, 0.001f64..8.0, 0.001f64..8.0),
        k in 1usize..80,
        samples in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 300),
    ) {
        let q = BoundingBox::from_coords(x, y, x + w, y + h).unwrap();
        let (t, tiles) = constrained_tiles(&q, k).unwrap();
        prop_assert!(t.constraint_violated || tiles.len() <= k);
        prop_assert!(t.stretch >= 1.0 - 1e-9);
        for (u, v) in samples {
            let p = GeoPoint { lng: x + u * w, lat: y + v * h };
            prop_assert!(tiles.iter().any(|t| tile_contains(t, &p)), "{p:?} uncovered");
        }
    }

    #[test]
    fn data_set_stores_once_under_intersected_tiles(pts in points((-179.0, -89.0, 179.0, 89.0))) {
        let f = feature(1, &pts, "Foo", "ShopApp");
        let set = make_ogb_data_set(&f, 1000).unwrap();
        let inline: Vec<&OgbData> = set.iter().filter(|d| d.is_inline()).collect();
        prop_assert_eq!(inline.len(), 1);
        for d in &set {
            if let OgbBody::Reference(target) = &d.body {
                prop_assert_eq!(target, &inline[0].name);
            }
            let level_tiles = intersected_tiles(&f.geometry, d.name.tile.level()).unwrap();
            prop_assert!(level_tiles.contains(&d.name.tile));
        }
        let distinct: BTreeSet<_> = set.iter().map(|d| d.name.to_name()).collect();
        prop_assert_eq!(distinct.len(), set.len());
    }

    #[test]
    fn include_results_subset_of_intersect(pts in points(ROME), q in boxes(ROME)) {
        let f = feature(1, &pts, "Foo", "ShopApp");
        prop_assert!(!matches(&f, &q, FilterMode::Include) || matches(&f, &q, FilterMode::Intersect));
    }

    #[test]
    fn store_tile_queries_match_a_scan(
        ops in prop::collection::vec((any::<bool>(), 0usize..12, points(ROME), 0usize..2), 1..40),
        probes in prop::collection::vec((ROME.0..ROME.2, ROME.1..ROME.3, 0u8..3, 0usize..2), 10),
    ) {
        let cids = ["A", "B"];
        let mut store = Store::in_memory();
        // Latest geometry per live object, keyed by (oid, cid).
        let mut live: BTreeMap<(usize, usize), Vec<OgbData>> = BTreeMap::new();
        for (insert, oid, pts, c) in ops {
            if let Some(old) = live.remove(&(oid, c)) {
                for d in old {
                    store.delete(&d.name).unwrap();
                }
            }
            if insert {
                let set = make_ogb_data_set(&feature(oid, &pts, "Foo", cids[c]), 1000).unwrap();
                for d in &set {
                    store.put(d.clone()).unwrap();
                }
                live.insert((oid, c), set);
            }
        }
        store.check_coherence().unwrap();
        for (x, y, level, c) in probes {
            let tile = tilebase::grid::locate(&GeoPoint { lng: x, lat: y }, level).unwrap();
            let tn = TileName::new(tile.clone(), "Foo", cids[c]).unwrap();
            let got: BTreeSet<String> = store.tile_query(&tn).iter().map(|d| d.name.to_name().to_string()).collect();
            let want: BTreeSet<String> = live
                .values()
                .flatten()
                .filter(|d| d.name.tile == tile && d.name.cid == cids[c])
                .map(|d| d.name.to_name().to_string())
                .collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn bf_server_is_the_or_of_engine_filters(
        ops in prop::collection::vec((0usize..3, any::<bool>(), 0usize..40), 1..200),
    ) {
        let params = BloomParams { m: 512, h: 3 };
        let ids: Vec<String> = (0..3).map(|i| format!("e{i}")).collect();
        let mut cbfs: Vec<CountingBloomFilter> = ids.iter().map(|_| CountingBloomFilter::new(params)).collect();
        let mut held: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); 3];
        let mut seq = vec![0u64; 3];
        let mut server = BfServerState::new(params, ids.clone());
        for (e, insert, key) in ops {
            let k = format!("ndn:/OGB/12/41/{key}/GPS-ID");
            let transitions = if insert {
                *held[e].entry(key).or_default() += 1;
                cbfs[e].insert_key(&k)
            } else if let Some(n) = held[e].get_mut(&key) {
                *n -= 1;
                if *n == 0 {
                    held[e].remove(&key);
                }
                cbfs[e].remove_key(&k)
            } else {
                continue;
            };
            for (bucket, direction) in transitions {
                seq[e] += 1;
                server.apply(&BfPublication { engine_id: ids[e].clone(), bucket, direction, seq: seq[e] });
            }
        }
        let mut union = BTreeSet::new();
        for (e, cbf) in cbfs.iter().enumerate() {
            let nz: BTreeSet<u32> = cbf.nonzero().into_iter().collect();
            prop_assert_eq!(server.engine_buckets(&ids[e]).unwrap(), &nz);
            union.extend(nz);
        }
        let ones: BTreeSet<u32> = server.filter().ones().into_iter().collect();
        prop_assert_eq!(&ones, &union);
        for (e, keys) in held.iter().enumerate() {
            for key in keys.keys() {
                let k = format!("ndn:/OGB/12/41/{key}/GPS-ID");
                prop_assert!(cbfs[e].contains(&k) && server.contains(&k));
            }
        }
        // A server rebuilt from digests ends in the same state.
        let mut rebuilt = BfServerState::new(params, ids.clone());
        for (e, cbf) in cbfs.iter().enumerate() {
            rebuilt.apply_digest(&CbfDigest { engine_id: ids[e].clone(), seq: seq[e], buckets: cbf.nonzero(), next_batch: 0 });
        }
        prop_assert_eq!(rebuilt.filter().ones(), server.filter().ones());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn range_queries_match_brute_force(
        world in prop::collection::vec((points(ROME), 0usize..2), 1..40),
        queries in prop::collection::vec((boxes(ROME), 1usize..60), 4),
    ) {
        let tiles: Vec<TileId> = [(12, 41), (13, 41)].iter().map(|&(x, y)| TileId::new(x, y, Vec::new()).unwrap()).collect();
        let mut c = SimCluster::new(ClusterConfig::per_tile(&tiles)).unwrap();
        let alice = c.issue_user("Foo", "Alice").unwrap();
        let mut fe = c.frontend(alice);
        let cids = ["ShopApp", "Parks"];
        let feats: Vec<GeoFeature> = world.iter().enumerate().map(|(i, (pts, cc))| feature(i, pts, "Foo", cids[*cc])).collect();
        prop_assert!(c.insert(&mut fe, &feats).unwrap().all_ok());
        for (q, k) in queries {
            for mode in [FilterMode::Intersect, FilterMode::Include] {
                let want: BTreeSet<String> = feats.iter().filter(|f| f.cid() == "ShopApp" && matches(f, &q, mode)).map(|f| f.oid()).collect();
                let mut seen = Vec::new();
                for bf in [false, true] {
                    let r = c.query(&mut fe, &RangeQuery::new(q, mode, "Foo", "ShopApp").with_k(k).with_bf(bf)).unwrap();
                    let got: BTreeSet<String> = r.oids().into_iter().collect();
                    prop_assert_eq!(got.len(), r.features.len(), "duplicate results");
                    prop_assert_eq!(&got, &want);
                    prop_assert!(r.counts.items_after_filter <= r.counts.items_fetched);
                    prop_assert!(r.constraint_violated || r.counts.tiles_queried <= k);
                    seen.push(got);
                }
                prop_assert_eq!(&seen[0], &seen[1]);
            }
        }
    }
}
