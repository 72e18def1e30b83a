use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const STARBUCKS: &str = r#"{"type": "Feature",
    "geometry": {"type": "Point","coordinates": [12.51133, 41.8919]},
    "properties": {"oid" : 1234, "tid" : "Foo", "uid": "Alice", "cid": "ShopApp", "shop-name": "Starbucks", "shop-type" : "coffeehouse" }}"#;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tilebase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilebase")).current_dir(dir).args(args).output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    serde_json::from_slice(&out.stderr).unwrap()
}

fn oids(report: &Value) -> Vec<String> {
    let mut v: Vec<String> = report["features"].as_array().unwrap().iter().map(|f| f["properties"]["oid"].to_string()).collect();
    v.sort();
    v
}

fn shops() -> Value {
    let feats: Vec<Value> = (0..40)
        .map(|i| {
            let (x, y) = (12.3 + 0.013 * i as f64, 41.7 + 0.007 * i as f64);
            json!({
                "type": "Feature",
                "geometry": {"type": "MultiPoint", "coordinates": [[x, y], [x + 0.02, y + 0.01]]},
                "properties": {"oid": format!("shop{i}"), "tid": "Foo", "uid": if i % 2 == 0 { "Alice" } else { "Bob" }, "cid": "ShopApp"}
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": feats})
}

#[test]
fn starbucks_is_found_after_insert() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sb.json"), STARBUCKS).unwrap();
    let w = ok_json(&tilebase(dir.path(), &["insert", "sb.json"]));
    assert_eq!(w["ok"], true);
    let r = ok_json(&tilebase(dir.path(), &["query", "--bbox", "12.50,41.88,12.53,41.90", "--mode", "intersect"]));
    assert_eq!(oids(&r), vec!["1234"]);
    // Data lives in the data directory, not the process.
    let r = ok_json(&tilebase(dir.path(), &["query", "--bbox", "12.50,41.88,12.53,41.90", "--mode", "include", "--bf"]));
    assert_eq!(oids(&r), vec!["1234"]);

    assert_eq!(ok_json(&tilebase(dir.path(), &["remove", "sb.json"]))["ok"], true);
    let r = ok_json(&tilebase(dir.path(), &["query", "--bbox", "12.50,41.88,12.53,41.90"]));
    assert!(oids(&r).is_empty());
}

#[test]
fn sim_mode_is_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("shops.json"), shops().to_string()).unwrap();
        ok_json(&tilebase(dir.path(), &["insert", "shops.json"]));
        let a = tilebase(dir.path(), &["query", "--bbox", "12.3,41.7,12.9,42.0", "--user", "Alice"]);
        let b = tilebase(dir.path(), &["query", "--bbox", "12.4,41.75,12.6,41.9", "--mode", "include", "--bf", "--k", "10", "--user", "Bob"]);
        (ok_json(&a), a.stdout, b.stdout)
    };
    let (first, a1, b1) = run();
    let (_, a2, b2) = run();
    assert_eq!(oids(&first).len(), 40);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn usage_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["query", "--bbox", "12.5,41.8,12.6"][..],
        &["query", "--bbox", "12.6,41.8,12.5,41.9"],
        &["query", "--bbox", "a,b,c,d"],
        &["tessellate", "--bbox", "1,1,2,2", "--frob"],
        &["--config", "missing.json", "bf-stats"],
        &["query", "--bbox", "1,1,2,2", "--mode", "sideways"],
        &["nonsense"],
    ] {
        let e = err_json(&tilebase(dir.path(), args), 2);
        assert_eq!(e["error"], "usage", "{args:?}");
        assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    // No key store yet: a runtime error, not a usage error.
    let e = err_json(&tilebase(dir.path(), &["query", "--bbox", "1,1,2,2", "--tenant", "Foo", "--collection", "c", "--user", "u"]), 1);
    assert_eq!(e["error"], "trust");
    assert!(tilebase(dir.path(), &["--help"]).status.success());
}

#[test]
fn tessellate_respects_k() {
    let dir = tempfile::tempdir().unwrap();
    let t = ok_json(&tilebase(dir.path(), &["tessellate", "--bbox", "12.2,41.7,12.8,42.1", "--k", "19"]));
    assert!(t["tiles"].as_u64().unwrap() <= 19 || t["constraintViolated"] == true);
    assert!(t["stretch"].as_f64().unwrap() >= 1.0);
    let t = ok_json(&tilebase(dir.path(), &["tessellate", "--bbox", "-10,-10,10,10", "--k", "19"]));
    assert_eq!(t["constraintViolated"], true);
}

#[test]
fn keys_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(&tilebase(dir.path(), &["keys", "init", "--seed", "9"]));
    assert_eq!(err_json(&tilebase(dir.path(), &["keys", "init"]), 2)["error"], "usage");
    ok_json(&tilebase(dir.path(), &["keys", "issue-tenant", "Foo"]));
    let u = ok_json(&tilebase(dir.path(), &["keys", "issue-user", "Foo", "Alice"]));
    assert_eq!(u["identity"], "ndn:/OGB/tenants/Foo/users/Alice");
    let l = ok_json(&tilebase(dir.path(), &["keys", "list"]));
    assert_eq!(l["users"], json!(["ndn:/OGB/tenants/Foo/users/Alice"]));
}

#[test]
fn bench_rows_agree_with_model() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = json!({
        "name": "small", "sweep": "nq", "nq": [50, 200], "ni": [1, 100], "ndb": [1, 4], "h": [0.0, 1.0], "seed": 3
    });
    std::fs::write(dir.path().join("s.json"), scenario.to_string()).unwrap();
    let out = tilebase(dir.path(), &["bench", "s.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv_rows(&out.stdout);
    let header = rdr.remove(0);
    let col = header.iter().position(|h| h == "relErr").unwrap();
    assert_eq!(rdr.len(), 16);
    for row in rdr {
        assert!(row[col].parse::<f64>().unwrap() <= 0.10, "{row:?}");
    }
}

fn csv_rows(bytes: &[u8]) -> Vec<Vec<String>> {
    String::from_utf8_lossy(bytes).lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gtfs_feed_is_queryable() {
    let dir = tempfile::tempdir().unwrap();
    let feed = repo().join("fixtures/gtfs/rome-metro");
    let url = "https://example.org/gtfs/rome-metro.zip";
    let w = ok_json(&tilebase(dir.path(), &["ingest-gtfs", feed.to_str().unwrap(), "--url", url, "--tenant", "Its", "--user", "ops"]));
    assert_eq!(w["stops"], 15);
    assert_eq!(w["warnings"].as_array().unwrap().len(), 1);
    let r = ok_json(&tilebase(dir.path(), &["query", "--bbox", "12.3,41.7,12.7,42.1", "--k", "50", "--bf"]));
    assert_eq!(r["features"].as_array().unwrap().len(), 1);
    assert_eq!(r["features"][0]["properties"]["URL"], url);
}

fn port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn socket_mode_matches_sim_mode() {
    let boxes = ["12.3,41.7,12.9,42.0", "12.35,41.72,12.5,41.8", "12.6,41.8,12.9,41.95"];
    let sim = tempfile::tempdir().unwrap();
    std::fs::write(sim.path().join("shops.json"), shops().to_string()).unwrap();
    ok_json(&tilebase(sim.path(), &["insert", "shops.json"]));
    let expected: Vec<Vec<String>> = boxes.iter().map(|b| oids(&ok_json(&tilebase(sim.path(), &["query", "--bbox", b, "--user", "Alice"])))).collect();

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("shops.json"), shops().to_string()).unwrap();
    let mut cfg: Value = serde_json::from_slice(&std::fs::read(repo().join("configs/four-zones.json")).unwrap()).unwrap();
    cfg["mode"] = json!("socket");
    let addr = || json!({"host": "127.0.0.1", "port": port()});
    cfg["router"] = addr();
    cfg["certRepo"] = addr();
    cfg["bfServer"]["address"] = addr();
    for e in cfg["engines"].as_array_mut().unwrap() {
        e["address"] = addr();
    }
    std::fs::write(dir.path().join("cluster.json"), cfg.to_string()).unwrap();

    let mut server = Command::new(env!("CARGO_BIN_EXE_tilebase"))
        .current_dir(dir.path())
        .args(["--config", "cluster.json", "cluster", "start"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut stdout = std::io::BufReader::new(server.stdout.take().unwrap());
    let mut line = String::new();
    std::io::BufRead::read_line(&mut stdout, &mut line).unwrap();
    let started: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(started["status"], "running");

    let cli = |args: &[&str]| {
        let mut all = vec!["--config", "cluster.json"];
        all.extend_from_slice(args);
        tilebase(dir.path(), &all)
    };
    assert_eq!(ok_json(&cli(&["insert", "shops.json"]))["ok"], true);
    for (b, want) in boxes.iter().zip(&expected) {
        assert_eq!(&oids(&ok_json(&cli(&["query", "--bbox", b, "--user", "Alice"]))), want);
        assert_eq!(&oids(&ok_json(&cli(&["query", "--bbox", b, "--user", "Alice", "--bf"]))), want);
    }
    assert!(ok_json(&cli(&["bf-stats"]))["onesBits"].as_u64().unwrap() > 0);

    ok_json(&cli(&["cluster", "stop"]));
    let deadline = Instant::now() + Duration::from_secs(20);
    while server.try_wait().unwrap().is_none() {
        assert!(Instant::now() < deadline, "cluster did not stop");
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(server.wait().unwrap().success());
}

#[test]
fn shipped_configs_match_presets() {
    use tilebase::cluster::ClusterConfig;
    for (file, preset) in [("single-engine.json", ClusterConfig::single_engine()), ("four-zones.json", ClusterConfig::four_zones())] {
        let loaded = ClusterConfig::load(&repo().join("configs").join(file)).unwrap();
        assert_eq!(loaded, preset, "{file}");
    }
}
