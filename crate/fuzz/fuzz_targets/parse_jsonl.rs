#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::inference::{parse_jsonl, to_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(images) = parse_jsonl(text) {
            let again = parse_jsonl(&to_jsonl(&images).unwrap()).unwrap();
            assert_eq!(again, images);
        }
    }
});
