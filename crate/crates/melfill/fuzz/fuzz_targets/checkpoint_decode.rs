#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::training::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    // Header validation happens before tensor allocation, so hostile size
    // claims must be rejected, not trusted.
    if let Ok(loaded) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&loaded.model, &loaded.train_cfg, loaded.step, loaded.rng_state);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(again.step, loaded.step);
        assert_eq!(again.rng_state, loaded.rng_state);
    }
});
