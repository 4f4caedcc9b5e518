//! Replays the checked-in fuzz seed corpora through the parsers, so the
//! seeds stay valid (or stay invalid) as the formats evolve.

use std::path::PathBuf;

use weaver_core::codec::{build_trie, parse_codemap_tsv, write_codemap_tsv};
use weaver_core::config::RunConfig;
use weaver_core::corpus::{parse_embeddings, parse_tools, parse_trajectories, write_tools, ResolveMode};
use weaver_core::eval::{parse_queries, write_queries};
use weaver_core::persistence::{decode, decode_codemap, decode_graph, decode_model, Kind};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds whose names start with one of `good` must parse; the rest must not.
fn expect(name: &str, ok: bool, good: &[&str]) {
    let want = good.iter().any(|g| name.starts_with(g));
    assert_eq!(ok, want, "seed {name}");
}

#[test]
fn tools() {
    for (name, data) in seeds("tools") {
        let r = parse_tools(std::str::from_utf8(&data).unwrap());
        if let Ok(c) = &r {
            assert_eq!(&parse_tools(&write_tools(c)).unwrap(), c);
        }
        expect(&name, r.is_ok(), &["synthetic", "minimal", "category"]);
    }
}

#[test]
fn embeddings() {
    for (name, data) in seeds("embeddings") {
        let dim = usize::from(data[0] % 16) + 1;
        let r = parse_embeddings(&data[1..], dim);
        if let Ok(t) = &r {
            assert_eq!(t.dim(), dim);
        }
        expect(&name, r.is_ok(), &["synthetic", "empty"]);
    }
    let all = seeds("embeddings");
    let get = |n: &str| {
        let d = &all.iter().find(|(name, _)| name == n).unwrap().1;
        parse_embeddings(&d[1..], 4).unwrap()
    };
    let (text, bin) = (get("synthetic_dim4.jsonl"), get("synthetic_dim4.bin"));
    assert_eq!(text.ids(), bin.ids());
    for (a, b) in text.vectors().iter().flatten().zip(bin.vectors().iter().flatten()) {
        assert_eq!(*a as f32, *b as f32);
    }
}

#[test]
fn trajectories() {
    for (name, data) in seeds("trajectories") {
        let r = parse_trajectories(std::str::from_utf8(&data).unwrap(), None, ResolveMode::Strict);
        expect(&name, r.is_ok(), &["synthetic", "known"]);
    }
}

#[test]
fn queries() {
    for (name, data) in seeds("queries") {
        let dim = usize::from(data[0] % 8) + 1;
        let r = parse_queries(std::str::from_utf8(&data[1..]).unwrap(), dim, None);
        if let Ok(s) = &r {
            assert_eq!(&parse_queries(&write_queries(s), dim, None).unwrap(), s);
        }
        expect(&name, r.is_ok(), &["synthetic"]);
    }
}

#[test]
fn codemap_tsv() {
    for (name, data) in seeds("codemap_tsv") {
        let r = parse_codemap_tsv(std::str::from_utf8(&data).unwrap(), None);
        if let Ok(a) = &r {
            assert_eq!(&parse_codemap_tsv(&write_codemap_tsv(a), None).unwrap(), a);
            assert_eq!(build_trie(a).unwrap().leaf_count(), a.len());
        }
        expect(&name, r.is_ok(), &["synthetic", "hand"]);
    }
}

#[test]
fn bundles() {
    for (name, data) in seeds("bundle") {
        let decoded = [
            decode_model(&data).is_ok(),
            decode_codemap(&data).is_ok(),
            decode_graph(&data).is_ok(),
            decode::<serde_json::Value>(&data, Kind::Report).is_ok(),
        ];
        let want = match name.as_str() {
            "model.json" => [true, false, false, false],
            "codemap.json" => [false, true, false, false],
            "graph.json" => [false, false, true, false],
            "training_log.json" => [false, false, false, true],
            _ => [false; 4],
        };
        assert_eq!(decoded, want, "seed {name}");
    }
}

#[test]
fn configs() {
    for (name, data) in seeds("config") {
        let r = RunConfig::from_sources(Some(std::str::from_utf8(&data).unwrap()), &[]);
        expect(&name, r.is_ok(), &["synthetic", "overrides"]);
    }
}
