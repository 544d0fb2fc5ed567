#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::geometry::parse_detections_json;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(dets) = parse_detections_json(text) {
            assert!(dets.iter().all(|d| d.is_well_formed()));
        }
    }
});
