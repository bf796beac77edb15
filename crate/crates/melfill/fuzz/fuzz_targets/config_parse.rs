#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json_str(text) {
        // Accepted documents round-trip; resolution may still reject them.
        let round = RunConfig::from_json_str(&cfg.to_json_pretty()).expect("round-trip");
        assert_eq!(cfg, round);
        let _ = cfg.resolve();
    }
});
