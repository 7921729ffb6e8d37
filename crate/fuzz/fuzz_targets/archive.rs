#![no_main]

use danas::archive::{network_from_archive, Archive};
use danas::predictor::PredictorCheckpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(archive) = Archive::from_bytes(data) else { return };
    let again = Archive::from_bytes(&archive.to_bytes()).expect("written archive reads back");
    assert_eq!(again, archive);
    let _ = network_from_archive(&archive);
    let _ = PredictorCheckpoint::from_archive(&archive);
});
