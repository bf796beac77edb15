#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::masking::MaskPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = MaskPlan::from_json(text) {
        // from_json validates; an accepted plan re-validates and round-trips.
        plan.validate().expect("accepted plan stays valid");
        let again = MaskPlan::from_json(&plan.to_json()).expect("round-trip");
        assert_eq!(plan, again);
    }
});
