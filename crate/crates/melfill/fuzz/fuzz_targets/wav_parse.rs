#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Must never panic on arbitrary bytes. On success the type invariants
    // hold: non-empty, supported rate, samples within [-1, 1].
    if let Ok(w) = melfill::dsp::parse_wav_bytes(data) {
        assert!(!w.samples.is_empty());
        assert!(melfill::dsp::SUPPORTED_RATES.contains(&w.sample_rate_hz));
        assert!(w.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
    }
});
