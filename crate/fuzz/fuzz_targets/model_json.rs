#![no_main]

use jima_core::model::JointModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = JointModel::from_json_str(text) {
        let back = JointModel::from_json_str(&model.to_json_string().unwrap()).unwrap();
        assert_eq!(model, back);
    }
});
