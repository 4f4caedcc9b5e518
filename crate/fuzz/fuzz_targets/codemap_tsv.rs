#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::codec::{build_trie, parse_codemap_tsv, write_codemap_tsv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(a) = parse_codemap_tsv(text, None) else { return };
    assert_eq!(parse_codemap_tsv(&write_codemap_tsv(&a), Some(a.codes_per_level)).unwrap(), a);
    let trie = build_trie(&a).expect("a valid code map builds a trie");
    assert_eq!(trie.leaf_count(), a.len());
    for (id, path) in &a.codes {
        assert_eq!(trie.leaf(path), Some(id.as_str()));
    }
});
