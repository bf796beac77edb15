#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::dsp::{decode_features, encode_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = decode_features(data, 300, 24_000) {
        // Accepted buffers re-encode and decode to the same spectrogram.
        let bytes = encode_features(&spec);
        let again = decode_features(&bytes, 300, 24_000).expect("re-encode must decode");
        assert_eq!(spec, again);
    }
});
