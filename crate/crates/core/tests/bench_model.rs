use tilebase::perfmodel::bench::{bench_run, Axis, Scenario};
use tilebase::perfmodel::ProcessingCosts;

fn scenario(sweep: Axis) -> Scenario {
    serde_json::from_value(serde_json::json!({ "sweep": sweep })).unwrap()
}

#[test]
fn anchor_points_match_closed_form() {
    let mut s = scenario(Axis::H);
    s.h = vec![0.0, 1.0];
    let rows = bench_run(&s, None).unwrap();
    for r in &rows {
        eprintln!("{r:?}");
        assert!(r.rel_err <= 0.10, "{r:?}");
    }
    assert!((rows[0].predicted_ms - 2030.0).abs() < 1e-9);
    assert!((rows[1].predicted_ms - 415.0).abs() < 1e-9);
    assert_eq!(rows[1].engine_queries, 0);
}

#[test]
fn more_engines_is_faster() {
    let mut s = scenario(Axis::Ndb);
    s.ndb = vec![1, 4];
    s.ni = vec![1];
    s.nq = vec![50, 200];
    let rows = bench_run(&s, None).unwrap();
    for nq in [50, 200] {
        let t = |ndb| rows.iter().find(|r| r.ndb == ndb && r.nq == nq).unwrap().measured_ms;
        assert!(t(4) < t(1), "nq={nq}");
    }
}

#[test]
fn too_many_engines_is_config_error() {
    let mut s = scenario(Axis::Ndb);
    s.ndb = vec![5];
    let cfg = tilebase::cluster::ClusterConfig::four_zones();
    assert!(bench_run(&s, Some(&cfg)).is_err());
    s.costs = ProcessingCosts { pdb: 0.5, ..ProcessingCosts::default() };
    assert!(bench_run(&s, None).is_err());
}
