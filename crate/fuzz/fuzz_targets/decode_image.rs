#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::persist::decode_image_bytes;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = decode_image_bytes(data) {
        assert_eq!(grid.features.len(), grid.size * grid.size * grid.dim);
        assert!(grid.features.iter().all(|v| v.is_finite()));
    }
});
