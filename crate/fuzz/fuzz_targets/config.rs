#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_sources(Some(text), &[]) {
        assert_eq!(RunConfig::from_sources(Some(&cfg.to_toml()), &[]).unwrap(), cfg);
    }
});
