#![no_main]

use danas::search_space::SearchSpaceSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = text.parse::<SearchSpaceSpec>() else { return };
    if spec.validate().is_err() {
        return;
    }
    let again: SearchSpaceSpec = spec.to_string().parse().expect("display output parses");
    assert_eq!(again, spec);
    assert_eq!(again.digest(), spec.digest());
});
