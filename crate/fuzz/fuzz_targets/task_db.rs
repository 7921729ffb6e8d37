#![no_main]

use std::path::Path;

use danas::task_db::parse_db;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_db(text, Path::new("/nonexistent/danas-fuzz"));
});
