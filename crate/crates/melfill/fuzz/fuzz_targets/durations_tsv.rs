#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::alignment::PhoneVocab;
use melfill::inference::DurationStats;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = PhoneVocab::parse("SIL\nAA\nAH\nB\nK\nT\n").unwrap();
    if let Ok(stats) = DurationStats::from_tsv_str(text, &vocab) {
        // Accepted tables round-trip through the writer.
        let round = stats.to_tsv(&vocab);
        let again = DurationStats::from_tsv_str(&round, &vocab).expect("round-trip");
        assert_eq!(stats, again);
    }
});
