#![no_main]

use libfuzzer_sys::fuzz_target;
use uniworld::experiment::ExperimentConfig;
use uniworld::labelspace::{EmbeddingTable, LabelSpace};
use uniworld::persist::Manifest;

// Every JSON document the tools read besides checkpoints and detections.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<ExperimentConfig>(text) {
        let _ = cfg.validate();
    }
    let _ = serde_json::from_str::<Manifest>(text);
    if let Ok(space) = serde_json::from_str::<LabelSpace>(text) {
        let keys: Vec<&str> = space.iter().collect();
        assert!(LabelSpace::new(keys).is_ok());
    }
    if let Ok(table) = serde_json::from_str::<EmbeddingTable>(text) {
        for k in table.keys() {
            let n: f64 = table.get(k).unwrap().iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() <= 1e-6);
        }
    }
});
