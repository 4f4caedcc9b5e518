#![no_main]
use std::collections::BTreeMap;

use libfuzzer_sys::fuzz_target;
use weaver_core::codec::{build_trie, constrained_beam_search, CodeAssignment};

// Bytes become K, L, a set of paths, a beam width and per-step scores.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let k = usize::from(data[0] % 6) + 2;
    let levels = usize::from(data[1] % 3) + 1;
    let width = usize::from(data[2] % 8) + 1;
    let n = usize::from(data[3] % 24) + 1;
    let mut rest = data[4..].iter().copied().cycle();
    let mut codes = BTreeMap::new();
    for i in 0..n {
        let path: Vec<usize> = (0..levels).map(|_| usize::from(rest.next().unwrap_or(0)) % k).collect();
        if !codes.values().any(|p| p == &path) {
            codes.insert(format!("t{i}"), path);
        }
    }
    let Ok(a) = CodeAssignment::new(levels, k, codes, 0) else { return };
    let trie = build_trie(&a).unwrap();
    let scores: Vec<f64> = data.iter().map(|&b| f64::from(b) - 128.0).collect();
    let scorer = |p: &[usize]| -> Vec<f64> {
        let seed = p.iter().fold(p.len(), |h, &c| h * 31 + c);
        (0..k).map(|c| scores[(seed + c) % scores.len()]).collect()
    };
    let hits = constrained_beam_search(&scorer, &trie, width, n);
    assert!(hits.len() <= width.min(trie.leaf_count()));
    for h in &hits {
        assert_eq!(trie.leaf(&h.path), Some(h.tool_id.as_str()));
    }
});
