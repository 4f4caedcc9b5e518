#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::corpus::{parse_trajectories, write_trajectories, ResolveMode, ToolCorpus};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(loaded) = parse_trajectories(text, None, ResolveMode::Strict) {
        assert!(loaded.set.trajectories.iter().all(|t| !t.is_empty()));
        let again = parse_trajectories(&write_trajectories(&loaded.set), None, ResolveMode::Strict).unwrap();
        assert_eq!(again.set, loaded.set);
    }
    let known = ToolCorpus::from_ids(&["a", "b", "c"]).unwrap();
    if let Ok(loaded) = parse_trajectories(text, Some(&known), ResolveMode::Lenient) {
        assert!(loaded.set.trajectories.iter().flatten().all(|id| known.contains(id)));
    }
});
