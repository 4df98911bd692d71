#![no_main]

use libfuzzer_sys::fuzz_target;
use staged_alae::dataset::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_manifest(data) {
        for r in &records {
            assert!(!r.id.is_empty());
        }
    }
});
