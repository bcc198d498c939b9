use std::path::Path;
use std::process::{Command, Output};

fn sct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sct")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sct(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = "d = 8\ninducing = 12\nmax_iter = 40\ntm_max_iter = 40\n";

#[test]
fn fit_sample_score_exceed_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("cfg.toml"), CONFIG).unwrap();

    ok(&["synth", "--nx", "4", "--ny", "4", "-n", "24", "--seed", "3", "--out", s(&p("train.scte"))]);
    ok(&["synth", "--nx", "4", "--ny", "4", "-n", "10", "--seed", "4", "--out", s(&p("test.scte"))]);
    ok(&["fit", "--config", s(&p("cfg.toml")), "--data", s(&p("train.scte")), "--out", s(&p("m.sctm")), "--trace", s(&p("trace.jsonl"))]);
    assert!(!std::fs::read_to_string(p("trace.jsonl")).unwrap().is_empty());

    ok(&["score", "--model", s(&p("m.sctm")), "--data", s(&p("test.scte")), "--out", s(&p("score.csv"))]);
    let score = std::fs::read_to_string(p("score.csv")).unwrap();
    assert_eq!(score.lines().count(), 11);
    assert!(score.starts_with("split,replicate,log_density"));

    ok(&["sample", "--model", s(&p("m.sctm")), "-n", "50", "--out", s(&p("samples.scte"))]);
    let out = ok(&[
        "exceed", "--samples", s(&p("samples.scte")), "--quantile", "0.9", "--reference", s(&p("train.scte")), "--out",
        s(&p("exceed.csv")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("threshold="));
    let rows = std::fs::read_to_string(p("exceed.csv")).unwrap();
    assert_eq!(rows.lines().count(), 17);

    ok(&["roundtrip-check", "--model", s(&p("m.sctm")), "--data", s(&p("test.scte")), "--samples", "5"]);
    ok(&["order", "--data", s(&p("train.scte")), "--out", s(&p("order.csv"))]);
}

#[test]
fn common_noise_gives_identical_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("cfg.toml"), CONFIG).unwrap();
    ok(&["synth", "--nx", "3", "--ny", "3", "-n", "16", "--out", s(&p("train.scte"))]);
    ok(&["fit", "--config", s(&p("cfg.toml")), "--data", s(&p("train.scte")), "--out", s(&p("m.sctm"))]);
    ok(&["noise", "-n", "8", "--locations", "9", "--seed", "11", "--out", s(&p("noise.sctn"))]);
    for name in ["a.scte", "b.scte"] {
        ok(&["sample", "--model", s(&p("m.sctm")), "--common-noise", s(&p("noise.sctn")), "--out", s(&p(name))]);
    }
    assert_eq!(std::fs::read(p("a.scte")).unwrap(), std::fs::read(p("b.scte")).unwrap());
}

#[test]
fn csv_ingest_then_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("in.csv"), "lon,lat,r1,r2\n0,0,1.0,2.0\n10,0,1.5,2.5\n0,10,0.5,1.5\n").unwrap();
    ok(&["ingest", "--csv", s(&p("in.csv")), "--out", s(&p("e.scte"))]);
    ok(&["order", "--data", s(&p("e.scte")), "--out", s(&p("o.csv"))]);
    assert_eq!(std::fs::read_to_string(p("o.csv")).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.scte");
    assert_eq!(sct(&["order", "--data", s(&missing), "--out", "x"]).status.code(), Some(4));
    assert_eq!(sct(&["frobnicate"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "d = 0\n").unwrap();
    assert_ne!(sct(&["explain-config", "--config", s(&cfg)]).status.code(), Some(0));

    let garbage = dir.path().join("g.scte");
    std::fs::write(&garbage, b"not an ensemble").unwrap();
    let out = sct(&["order", "--data", s(&garbage), "--out", s(&dir.path().join("o.csv"))]);
    assert!(!out.status.success());
}

#[test]
fn explain_config_lists_every_key() {
    let out = ok(&["explain-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["family", "use_h", "inducing", "tm_max_neighbors", "validation_fraction", "seed"] {
        assert!(text.contains(key), "missing {key}");
    }
}
