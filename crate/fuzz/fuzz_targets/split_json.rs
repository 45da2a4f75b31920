#![no_main]

use jima_core::obs_store::SplitPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = SplitPlan::from_json_str(text) {
        let back = SplitPlan::from_json_str(&plan.to_json_string().unwrap()).unwrap();
        assert_eq!(plan, back);
    }
});
