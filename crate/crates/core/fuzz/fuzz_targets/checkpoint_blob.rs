#![no_main]

use libfuzzer_sys::fuzz_target;
use staged_alae::checkpoint::{decode_blob, encode_blob, sha256_hex, TensorEntry};

// byte 0: rank (low 2 bits) and whether to corrupt the digest (bit 7),
// then one byte per dimension, then the blob
fuzz_target!(|data: &[u8]| {
    let Some((&head, rest)) = data.split_first() else { return };
    let rank = (head & 3) as usize;
    if rest.len() < rank {
        return;
    }
    let (dims, blob) = rest.split_at(rank);
    let mut sha = sha256_hex(blob);
    if head & 0x80 != 0 {
        sha.replace_range(0..1, if sha.starts_with('0') { "1" } else { "0" });
    }
    let entry = TensorEntry {
        name: "fuzz".into(),
        shape: dims.iter().map(|&d| d as usize).collect(),
        dtype: "f32".into(),
        file: "tensors/t0000.bin".into(),
        sha256: sha,
    };
    if let Ok(t) = decode_blob(&entry, blob) {
        assert_eq!(head & 0x80, 0);
        assert_eq!(encode_blob(&t.data), blob);
    }
});
