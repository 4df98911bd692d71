#![no_main]

use libfuzzer_sys::fuzz_target;
use staged_alae::checkpoint::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        for t in &m.tensors {
            assert!(t.file.starts_with("tensors/") && !t.file.contains(".."));
        }
    }
});
