#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::eval::{parse_queries, write_queries};

fuzz_target!(|data: &[u8]| {
    let Some((&d, body)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(body) else { return };
    let dim = usize::from(d % 8) + 1;
    if let Ok(set) = parse_queries(text, dim, None) {
        let again = parse_queries(&write_queries(&set), dim, None).unwrap();
        assert_eq!(again, set);
    }
});
