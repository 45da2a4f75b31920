#![no_main]

use jima_core::ratings::RatingsManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RatingsManifest::from_json_str(text) {
        let back = RatingsManifest::from_json_str(&m.to_json_string().unwrap()).unwrap();
        assert_eq!(m, back);
    }
});
