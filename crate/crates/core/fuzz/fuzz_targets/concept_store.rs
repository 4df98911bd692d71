#![no_main]

use libfuzzer_sys::fuzz_target;
use staged_alae::concept_store::{decode_concepts, encode_concepts};

fuzz_target!(|data: &[u8]| {
    if let Ok(concepts) = decode_concepts(data) {
        let bytes = encode_concepts(&concepts).expect("decoded stores re-encode");
        let again = decode_concepts(&bytes).expect("re-encoded stores decode");
        assert_eq!(again.len(), concepts.len());
    }
});
