#![no_main]

use jima_core::simgen::GroundTruth;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(truth) = GroundTruth::from_json_str(text) {
        for s in &truth.sources {
            let idx = vec![0; s.fibers.len()];
            assert!(truth.predict(s.id, &idx).is_ok());
        }
    }
});
