#![no_main]

use jima_core::runner::ExperimentSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ExperimentSpec::from_json_str(text) {
        let back = ExperimentSpec::from_json_str(&spec.to_json_string().unwrap()).unwrap();
        assert_eq!(spec, back);
    }
});
