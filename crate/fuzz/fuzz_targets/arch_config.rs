#![no_main]

use danas::search_space::{ArchConfig, SearchSpaceSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = text.parse::<ArchConfig>() else { return };
    let again: ArchConfig = config.to_string().parse().expect("display output parses");
    assert_eq!(again, config);
    for spec in [SearchSpaceSpec::mini(), SearchSpaceSpec::standard()] {
        let _ = config.validate(&spec);
    }
});
