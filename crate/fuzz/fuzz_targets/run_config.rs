#![no_main]

use danas_cli::config::{Preset, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for preset in [Preset::Mini, Preset::PaperScale] {
        if let Ok(cfg) = RunConfig::resolve_text(preset, Some(("fuzz", text)), &[]) {
            let back = RunConfig::resolve_text(preset, Some(("fuzz", &cfg.to_toml())), &[]).expect("resolved config reloads");
            assert_eq!(back.to_toml(), cfg.to_toml());
        }
    }
});
