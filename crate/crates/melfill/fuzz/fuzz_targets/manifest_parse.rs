#![no_main]
use libfuzzer_sys::fuzz_target;
use melfill::training::{parse_manifest_str, serialize_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest_str(text) {
        // Accepted manifests are non-empty and round-trip.
        assert!(!entries.is_empty());
        let again = parse_manifest_str(&serialize_manifest(&entries)).expect("round-trip");
        assert_eq!(entries, again);
    }
});
