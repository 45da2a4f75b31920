#![no_main]

use jima_core::obs_store::{read_observations, FiberSpec, SchemaConfig, SourceSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let fibers = ["user", "top", "bottom"]
        .iter()
        .enumerate()
        .map(|(id, l)| FiberSpec {
            id,
            label: l.to_string(),
            dim: 4,
        })
        .collect();
    let config = SchemaConfig {
        fibers,
        sources: vec![
            SourceSpec::new(1, "utb", &[0, 1, 2]),
            SourceSpec::new(2, "ut", &[0, 1]),
            SourceSpec::new(3, "ub", &[0, 2]),
            SourceSpec::new(4, "tb", &[1, 2]),
        ],
    };
    if let Ok(schema) = read_observations(data, &config, "fuzz") {
        for s in schema.sources() {
            for (idx, v) in s.iter() {
                assert!(v.is_finite());
                assert!(idx.iter().zip(s.fibers()).all(|(&i, &f)| i < config.fibers[f].dim));
            }
        }
    }
});
