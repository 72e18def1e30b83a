use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tilebase::cluster::{ClusterConfig, Mode, SimCluster, SocketCluster, TrustRoot};
use tilebase::frontend::RangeQuery;
use tilebase::geodata::{FilterMode, GeoFeature};
use tilebase::grid::TileId;
use tilebase::icn::{Address, FetchRequest, Substrate};
use tilebase::naming::TileName;
use tilebase::BoundingBox;

fn port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn addr() -> Address {
    Address { host: "127.0.0.1".into(), port: port() }
}

fn config(data: Option<&std::path::Path>) -> ClusterConfig {
    let tiles: Vec<TileId> = [(12, 41), (13, 41)].iter().map(|&(x, y)| TileId::new(x, y, Vec::new()).unwrap()).collect();
    let mut c = ClusterConfig::per_tile(&tiles);
    c.mode = Mode::Socket;
    c.router = addr();
    c.cert_repo = addr();
    c.bf_server.as_mut().unwrap().address = addr();
    for e in &mut c.engines {
        e.address = addr();
    }
    c.data_dir = data.map(Into::into);
    c
}

fn features(n: usize) -> Vec<GeoFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|i| {
            let pts: Vec<Vec<f64>> = (0..rng.gen_range(1..4)).map(|_| vec![rng.gen_range(12.0..14.0), rng.gen_range(41.0..42.0)]).collect();
            let v = json!({
                "type": "Feature",
                "geometry": {"type": "MultiPoint", "coordinates": pts},
                "properties": {"oid": format!("s{i}"), "tid": "Foo", "uid": "Alice", "cid": "ShopApp"}
            });
            GeoFeature::from_value(&v).unwrap()
        })
        .collect()
}

fn boxes() -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..20)
        .map(|_| {
            let (x, y) = (rng.gen_range(12.0..13.8), rng.gen_range(41.0..41.8));
            let (w, h) = (rng.gen_range(0.01..0.3), rng.gen_range(0.01..0.2));
            BoundingBox::from_coords(x, y, (x + w).min(14.0), (y + h).min(42.0)).unwrap()
        })
        .collect()
}

type Results = Vec<BTreeSet<String>>;

fn run_sim(feats: &[GeoFeature]) -> Results {
    let mut cfg = config(None);
    cfg.mode = Mode::Sim;
    let mut c = SimCluster::new(cfg).unwrap();
    let alice = c.issue_user("Foo", "Alice").unwrap();
    let mut fe = c.frontend(alice);
    assert!(c.insert(&mut fe, feats).unwrap().all_ok());
    let mut out = Vec::new();
    for b in boxes() {
        for mode in [FilterMode::Intersect, FilterMode::Include] {
            for bf in [false, true] {
                let r = c.query(&mut fe, &RangeQuery::new(b, mode, "Foo", "ShopApp").with_bf(bf)).unwrap();
                out.push(r.oids().into_iter().collect());
            }
        }
    }
    out
}

fn query_socket(cluster: &SocketCluster, trust: &TrustRoot, alice: &Arc<tilebase::trust::Credentials>) -> Results {
    let mut client = cluster.client(alice, trust).unwrap();
    let mut fe = cluster.frontend(alice.clone(), trust);
    let mut out = Vec::new();
    for b in boxes() {
        for mode in [FilterMode::Intersect, FilterMode::Include] {
            for bf in [false, true] {
                let r = fe.range_query(&mut client, &RangeQuery::new(b, mode, "Foo", "ShopApp").with_bf(bf)).unwrap();
                out.push(r.oids().into_iter().collect());
            }
        }
    }
    out
}

#[test]
fn socket_and_sim_agree_and_data_survives_restart() {
    let feats = features(300);
    let sim = run_sim(&feats);
    assert!(sim.iter().any(|s| !s.is_empty()));

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Some(dir.path()));
    let mut trust = TrustRoot::from_seed(5);
    let alice = Arc::new(trust.issue_user("Foo", "Alice").unwrap());
    let cluster = SocketCluster::start(cfg.clone(), &mut trust).unwrap();
    {
        let mut client = cluster.client(&alice, &trust).unwrap();
        let mut fe = cluster.frontend(alice.clone(), &trust);
        for chunk in feats.chunks(100) {
            let w = fe.insert_batch(&mut client, chunk).unwrap();
            assert!(w.all_ok(), "{:?}", w.errors);
        }
    }
    assert_eq!(query_socket(&cluster, &trust, &alice), sim);

    // Another tenant's signed tile-query is dropped before any engine.
    let carol = Arc::new(trust.issue_user("Bar", "Carol").unwrap());
    let mut client = cluster.client(&carol, &trust).unwrap();
    client.timeout = std::time::Duration::from_millis(100);
    client.retries = 1;
    let name = TileName::new(TileId::new(12, 41, Vec::new()).unwrap(), "Foo", "ShopApp").unwrap().to_name();
    assert!(client.fetch(vec![FetchRequest::segmented(name, Some(carol.clone()))], 1)[0].is_err());
    cluster.stop().unwrap();

    let cluster = SocketCluster::start(cfg, &mut trust).unwrap();
    assert_eq!(query_socket(&cluster, &trust, &alice), sim);
    cluster.stop().unwrap();
}
