#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::alignment::PhoneVocab;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = PhoneVocab::parse(text) {
        // ids and symbols are mutually consistent.
        for id in 0..vocab.len() as u32 {
            let sym = vocab.symbol(id).expect("id in range");
            assert_eq!(vocab.id(sym), Some(id));
        }
    }
});
