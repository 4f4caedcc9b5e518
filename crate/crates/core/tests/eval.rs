use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use weaver_core::codec::{build_trie, constrained_beam_search, CodeAssignment};
use weaver_core::corpus::SyntheticSpec;
use weaver_core::eval::*;
use weaver_core::quantizer::QuantizerConfig;
use weaver_core::rng::{stream, Stream};
use weaver_core::Error;

/// Direct formula: DCG = sum rel_i / log2(i + 1) over 1-based positions,
/// divided by the DCG of the relevance vector sorted descending.
fn ndcg_direct(ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let rel: Vec<f64> = ranked.iter().map(|t| if relevant.contains(*t) { 1.0 } else { 0.0 }).collect();
    let dcg = |v: &[f64]| -> f64 {
        let mut s = 0.0;
        for (i, r) in v.iter().take(k).enumerate() {
            if *r > 0.0 {
                s += r / ((i + 2) as f64).log2();
            }
        }
        s
    };
    let mut ideal = vec![1.0; relevant.len()];
    ideal.resize(ranked.len().max(relevant.len()), 0.0);
    dcg(&rel) / dcg(&ideal)
}

fn permutations(items: &[&'static str]) -> Vec<Vec<&'static str>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn ndcg_matches_direct_formula_exhaustively() {
    let items = ["a", "b", "c", "d"];
    let perms = permutations(&items);
    assert_eq!(perms.len(), 24);
    let mut checked = 0;
    for mask in 1u32..16 {
        let relevant: BTreeSet<String> = (0..4).filter(|i| mask >> i & 1 == 1).map(|i| items[i].to_string()).collect();
        for p in &perms {
            for k in 1..=5 {
                let got = ndcg_at_k(p, &relevant, k).unwrap();
                assert_eq!(got.to_bits(), ndcg_direct(p, &relevant, k).to_bits(), "{p:?} {relevant:?} k={k}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 15 * 24 * 5);
}

#[test]
fn ndcg_edge_cases() {
    let r = BTreeSet::from(["x".to_string()]);
    assert_eq!(ndcg_at_k(&["x", "y"], &r, 1).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&["y", "z"], &r, 2).unwrap(), 0.0);
    assert_eq!(ndcg_at_k::<&str>(&[], &r, 3).unwrap(), 0.0);
    assert!(ndcg_at_k(&["x"], &BTreeSet::new(), 1).is_err());
    assert!(ndcg_at_k(&["x"], &r, 0).is_err());
}

/// Twenty leaves at K=5, L=2, with uniformly random step scores.
#[test]
fn random_scorer_hits_top_one_at_chance() {
    let mut codes = BTreeMap::new();
    for i in 0..20 {
        codes.insert(format!("t{i:02}"), vec![i / 5, i % 5]);
    }
    let trie = build_trie(&CodeAssignment::new(2, 5, codes, 0).unwrap()).unwrap();
    let mut rng = stream(11, Stream::Queries);
    let trials = 20_000;
    let mut hits = 0.0;
    for _ in 0..trials {
        let top: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let second: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let scorer = |p: &[usize]| if p.is_empty() { top.clone() } else { second[p[0]].clone() };
        let ranked: Vec<String> = constrained_beam_search(&scorer, &trie, 20, 1).into_iter().map(|h| h.tool_id).collect();
        let target = BTreeSet::from([format!("t{:02}", rng.random_range(0..20))]);
        hits += ndcg_at_k(&ranked, &target, 1).unwrap();
    }
    let rate = hits / trials as f64;
    assert!((rate - 0.05).abs() < 0.006, "{rate}");
}

fn small_setup() -> (SyntheticSpec, QuantizerConfig, EvalSettings) {
    let spec = SyntheticSpec { n_tools: 40, n_groups: 4, dim: 8, trajectories_per_group: 10, ..Default::default() };
    let config = QuantizerConfig {
        latent_dim: 4,
        hidden_dims: vec![8],
        codes_per_level: 8,
        batch_size: 16,
        epochs: 4,
        warmup_epochs: 1,
        learning_rate: 1e-3,
        ..Default::default()
    };
    (spec, config, EvalSettings::default())
}

#[test]
fn report_ignores_query_order() {
    let (spec, config, settings) = small_setup();
    let run = synthetic_run(&spec, &config, &settings, 3).unwrap();
    let trie = build_trie(&run.assignment).unwrap();
    let syn = weaver_core::corpus::synth_corpus(&SyntheticSpec { seed: 3, ..spec }).unwrap();
    let mut qs = synthetic_queries(&syn.embeddings, &syn.trajectories, QueryMode::Trajectory, 0.05, 3).unwrap();
    let a = run_eval(&qs, &run.model, &trie, &settings).unwrap();
    qs.queries.shuffle(&mut stream(9, Stream::Shuffle));
    let b = run_eval(&qs, &run.model, &trie, &settings).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    for v in a.ndcg.values() {
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn noiseless_tool_queries_mostly_find_themselves() {
    let (spec, config, settings) = small_setup();
    let settings = EvalSettings { query_noise: 0.0, ..settings };
    let run = synthetic_run(&spec, &config, &settings, 5).unwrap();
    // Only tools displaced by collision resolution can miss.
    assert!(run.report.ndcg[&5] > 0.5, "{:?}", run.report.ndcg);
}

#[test]
fn query_parsing_rejects_bad_rows() {
    let known = BTreeSet::from(["a", "b"]);
    let ok = r#"{"query_id":"q1","embedding":[0.0,1.0],"relevant":["a"]}"#;
    let set = parse_queries(ok, 2, Some(&known)).unwrap();
    assert_eq!(parse_queries(&write_queries(&set), 2, Some(&known)).unwrap(), set);
    assert!(matches!(parse_queries(ok, 3, None), Err(Error::DimensionMismatch { .. })));
    let unknown = r#"{"query_id":"q1","embedding":[0.0,1.0],"relevant":["zz"]}"#;
    assert!(matches!(parse_queries(unknown, 2, Some(&known)), Err(Error::UnknownTool(_))));
    let empty = r#"{"query_id":"q1","embedding":[0.0,1.0],"relevant":[]}"#;
    assert!(matches!(parse_queries(empty, 2, None), Err(Error::Parse { line: 1, .. })));
    let twice = format!("{ok}\n{ok}\n");
    assert!(matches!(parse_queries(&twice, 2, None), Err(Error::DuplicateId(_))));
}

#[test]
fn depth_sweep_marks_infeasible_rows() {
    let (spec, config, settings) = small_setup();
    let table = sweep_depth(&spec, &config, &settings, &[1, 2], &[0]).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(!table.rows[0].feasible && table.rows[0].ndcg.is_empty());
    assert!(table.rows[1].feasible && table.rows[1].ndcg.len() == 3);
    assert_eq!(table.rows[1].capacity, 64);
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,K,L,vocab_tokens,capacity,feasible,ndcg@1,ndcg@3,ndcg@5,collision_report,relative_std,sharing");
    assert!(lines[1].starts_with("1,8,1,8,8,false,,,,"), "{}", lines[1]);
    assert!(lines.iter().all(|l| l.split(',').count() == 12));
}

#[test]
fn vocabulary_arithmetic() {
    let s = atomic_baseline_stats(46_985, 1024, 2).unwrap();
    assert_eq!((s.atomic_tokens, s.compositional_tokens, s.capacity), (46_985, 2048, 1_048_576));
    assert!(s.fits && (s.ratio - 22.94).abs() < 0.01);
    assert!(!atomic_baseline_stats(100, 3, 4).unwrap().fits);
    assert!(atomic_baseline_stats(0, 3, 4).is_err());
}
