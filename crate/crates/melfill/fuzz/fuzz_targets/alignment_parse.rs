#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::alignment::{parse_alignment_str, serialize_alignment, PhoneVocab};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = PhoneVocab::parse("SIL\nAA\nAH\nB\nK\nT\n").unwrap();
    if let Ok((phones, map)) = parse_alignment_str(text, 300, 24_000, &vocab) {
        // Accepted alignments are contiguous from frame 0 and round-trip
        // through the serializer.
        assert_eq!(map.intervals()[0].start_frame, 0);
        let round = serialize_alignment(&phones, &map, 300, 24_000);
        let (phones2, map2) = parse_alignment_str(&round, 300, 24_000, &vocab)
            .expect("serializer output must reparse");
        assert_eq!(phones, phones2);
        assert_eq!(map, map2);
    }
});
