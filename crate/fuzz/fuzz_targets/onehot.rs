#![no_main]

use danas::search_space::{decode_onehot, encode_onehot, onehot_from_str, SearchSpaceSpec};
use libfuzzer_sys::fuzz_target;

// First byte picks the space, the rest is the vector, either raw or as text.
fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else { return };
    let spec = if pick & 1 == 0 { SearchSpaceSpec::mini() } else { SearchSpaceSpec::standard() };
    let v = if pick & 2 == 0 {
        rest.to_vec()
    } else {
        let Ok(text) = std::str::from_utf8(rest) else { return };
        let Ok(v) = onehot_from_str(text) else { return };
        v
    };
    if let Ok(config) = decode_onehot(&spec, &v) {
        assert_eq!(encode_onehot(&spec, &config).expect("decoded config encodes"), v);
    }
});
