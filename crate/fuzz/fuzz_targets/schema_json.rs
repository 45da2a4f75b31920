#![no_main]

use jima_core::obs_store::{Schema, SchemaConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = SchemaConfig::from_json_str(text) {
        if let Ok(schema) = Schema::empty(&config) {
            let again = SchemaConfig::from_json_str(&schema.config().to_json_string().unwrap()).unwrap();
            assert_eq!(schema.config(), again);
        }
    }
});
