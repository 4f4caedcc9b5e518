use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &["--set", "quantizer.epochs=8", "--set", "synthetic.n_tools=120"];

fn weaver(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaver"))
        .args(args)
        .args(FAST)
        .arg("--out-dir")
        .arg(out)
        .env_remove("WEAVER_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = weaver(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn payload(path: &Path) -> Value {
    let v: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v["payload"].clone()
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut stdout = Vec::new();
    for d in &dirs {
        let mut s = String::new();
        for cmd in ["fit", "assign", "eval"] {
            s += &ok(d.path(), &[cmd, "--seed", "7"]);
        }
        stdout.push(s);
    }
    assert_eq!(stdout[0], stdout[1]);
    for f in [
        "model.json",
        "model.json.sha256",
        "graph.json",
        "training_log.json",
        "codemap.json",
        "assign_report.json",
        "eval.json",
        "eval_per_query.jsonl",
    ] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let other = tempfile::tempdir().unwrap();
    ok(other.path(), &["fit", "--seed", "8"]);
    assert_ne!(
        std::fs::read(other.path().join("model.json")).unwrap(),
        std::fs::read(dirs[0].path().join("model.json")).unwrap()
    );
}

#[test]
fn outputs_are_well_formed() {
    let d = tempfile::tempdir().unwrap();
    let fit = ok(d.path(), &["fit"]);
    assert!(fit.starts_with("epoch") || fit.trim_start().starts_with("epoch"));
    assert_eq!(fit.lines().count(), 1 + 8 + 1);
    ok(d.path(), &["assign"]);
    let eval = ok(d.path(), &["eval"]);
    assert!(eval.lines().nth(1).unwrap().starts_with("MEAN"));
    let report = payload(&d.path().join("eval.json"));
    for (_, v) in report["ndcg"].as_object().unwrap() {
        let v = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    ok(d.path(), &["export"]);
    let tsv = std::fs::read_to_string(d.path().join("codemap.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 120);
    let vocab = std::fs::read_to_string(d.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), 2 * 32);
    let r = ok(d.path(), &["report", d.path().join("model.json").to_str().unwrap()]);
    assert!(r.contains("L=2 K=32"), "{r}");
}

#[test]
fn zero_lambda_drops_the_collab_contribution() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_weaver"))
        .args(["fit", "--collab-lambda", "0"])
        .args(FAST)
        .arg("--out-dir")
        .arg(d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let log = payload(&d.path().join("training_log.json"));
    for e in log.as_array().unwrap() {
        let (r, q, t) = (e["recon"].as_f64().unwrap(), e["quant"].as_f64().unwrap(), e["total"].as_f64().unwrap());
        assert_eq!(t, r + q);
        assert!(e["collab"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn no_sinkhorn_collides_more() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["fit", "--set", "quantizer.codes_per_level=16"]);
    ok(d.path(), &["assign", "--set", "quantizer.codes_per_level=16"]);
    let with = payload(&d.path().join("assign_report.json"))["collision_report"].as_u64().unwrap();
    ok(d.path(), &["assign", "--no-sinkhorn", "--set", "quantizer.codes_per_level=16"]);
    let without = payload(&d.path().join("assign_report.json"))["collision_report"].as_u64().unwrap();
    assert!(without > with, "{without} vs {with}");
    let a = payload(&d.path().join("codemap.json"));
    let paths: std::collections::BTreeSet<String> =
        a["codes"].as_object().unwrap().values().map(|p| p.to_string()).collect();
    assert_eq!(paths.len(), 120);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = weaver(d.path(), &["fit", "--set", "corpus.embeddings=/no/such/embeddings.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus.embeddings"));

    let o = weaver(d.path(), &["fit", "--set", "quantizer.learning_rate=1e300"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("quant"));

    let o = weaver(d.path(), &["report", "/no/such/bundle.json"]);
    assert_eq!(o.status.code(), Some(4));

    let o = weaver(d.path(), &["fit", "--set", "quantizer.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    ok(d.path(), &["fit"]);
    let model = d.path().join("model.json");
    let mut bytes = std::fs::read(&model).unwrap();
    let i = bytes.len() / 2;
    bytes[i] = if bytes[i] == b'3' { b'4' } else { b'3' };
    std::fs::write(&model, bytes).unwrap();
    let o = weaver(d.path(), &["report", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn weaver_out_is_the_fallback_directory() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_weaver"))
        .arg("synth")
        .args(FAST)
        .env("WEAVER_OUT", d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["tools.jsonl", "embeddings.jsonl", "trajectories.jsonl", "queries.jsonl", "run.toml"] {
        assert!(d.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn file_inputs_reproduce_the_synthetic_run() {
    let syn = tempfile::tempdir().unwrap();
    ok(syn.path(), &["synth"]);
    let files = tempfile::tempdir().unwrap();
    let p = |f: &str| syn.path().join(f).display().to_string();
    let sets = [
        format!("corpus.tools={:?}", p("tools.jsonl")),
        format!("corpus.embeddings={:?}", p("embeddings.jsonl")),
        format!("corpus.trajectories={:?}", p("trajectories.jsonl")),
        format!("corpus.queries={:?}", p("queries.jsonl")),
        "quantizer.input_dim=32".to_string(),
    ];
    let mut args = vec![];
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    for cmd in ["fit", "assign", "eval"] {
        let mut a = vec![cmd];
        a.extend(&args);
        ok(files.path(), &a);
    }
    let direct = tempfile::tempdir().unwrap();
    for cmd in ["fit", "assign", "eval"] {
        ok(direct.path(), &[cmd]);
    }
    // JSONL embeddings round-trip exactly, so both routes agree
    for f in ["model.json", "codemap.json", "eval.json"] {
        assert_eq!(
            payload(&files.path().join(f)),
            payload(&direct.path().join(f)),
            "{f}"
        );
    }
}

#[test]
fn depth_sweep_flags_infeasible_rows() {
    let d = tempfile::tempdir().unwrap();
    let csv = ok(
        d.path(),
        &["sweep", "depth", "--set", "sweep.levels=[1,2]", "--set", "sweep.seeds=[0]", "--set", "quantizer.epochs=2"],
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",32,1,32,32,false,"), "{}", rows[1]);
    assert!(rows[2].contains(",32,2,64,1024,true,"), "{}", rows[2]);
    assert!(d.path().join("sweep_depth.csv").is_file());
}
