#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::corpus::{parse_tools, write_tools};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(corpus) = parse_tools(text) {
        let again = parse_tools(&write_tools(&corpus)).expect("written tools parse");
        assert_eq!(again, corpus);
    }
});
