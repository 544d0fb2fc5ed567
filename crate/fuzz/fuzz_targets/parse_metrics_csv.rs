#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::report::{metrics_csv, parse_metrics_csv, summarize};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_metrics_csv(text) {
            let _ = summarize(&rows);
            let _ = metrics_csv(&rows);
        }
    }
});
