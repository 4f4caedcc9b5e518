#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::corpus::{parse_embeddings, write_embeddings_binary, write_embeddings_jsonl, EMBEDDING_MAGIC};

// First byte picks the expected dimension; the rest is either format.
fuzz_target!(|data: &[u8]| {
    let Some((&d, body)) = data.split_first() else { return };
    let dim = usize::from(d % 16) + 1;
    let Ok(table) = parse_embeddings(body, dim) else { return };
    assert_eq!(table.dim(), dim);
    assert!(table.vectors().iter().flatten().all(|x| x.is_finite()));
    if body.starts_with(EMBEDDING_MAGIC) {
        // binary values are already f32, so the binary form round-trips
        let again = parse_embeddings(&write_embeddings_binary(&table), dim).unwrap();
        assert_eq!(again.vectors(), table.vectors());
    } else {
        let again = parse_embeddings(write_embeddings_jsonl(&table).as_bytes(), dim).unwrap();
        assert_eq!(again.vectors(), table.vectors());
        assert_eq!(again.ids(), table.ids());
    }
});
