#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::persist::{checkpoint_json, parse_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(system) = parse_checkpoint(text) {
            let again = parse_checkpoint(&checkpoint_json(&system).unwrap()).unwrap();
            assert_eq!(again, system);
        }
    }
});
