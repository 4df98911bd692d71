use proptest::prelude::*;
use staged_alae::concept_store::{decode_concepts, encode_concepts, load_concepts, save_concepts, VERSION};
use staged_alae::concepts::{classify_metrics, normalize, ConceptVector};
use staged_alae::dataset::{BinaryTask, Split};
use staged_alae::Error;

fn concept(task: BinaryTask, raw: Vec<f64>, bias: f64) -> ConceptVector {
    let scores: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let labels: Vec<bool> = (0..8).map(|i| i % 3 != 0).collect();
    let only_pos = vec![true; 4];
    ConceptVector {
        task,
        positive_class: task.positive_class().into(),
        negative_class: task.negative_class().into(),
        direction: normalize(&raw).unwrap(),
        bias,
        raw_coefficients: raw,
        lambda: 1e-2,
        metrics: vec![
            classify_metrics(Split::Train, &scores, &labels, 0.0).unwrap(),
            classify_metrics(Split::Test, &scores[..4], &only_pos, 0.0).unwrap(),
        ],
        fingerprint: [7; 32],
    }
}

fn assert_close(a: &ConceptVector, b: &ConceptVector) {
    assert_eq!(a.task, b.task);
    assert_eq!(a.positive_class, b.positive_class);
    assert_eq!(a.raw_coefficients, b.raw_coefficients);
    assert_eq!(a.bias, b.bias);
    assert_eq!(a.lambda, b.lambda);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.fingerprint, b.fingerprint);
    // directions go through f32
    for (x, y) in a.direction.iter().zip(&b.direction) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

fn five() -> Vec<ConceptVector> {
    BinaryTask::ALL
        .iter()
        .enumerate()
        .map(|(i, &t)| concept(t, (0..512).map(|j| ((i * 512 + j) as f64 * 0.37).sin()).collect(), i as f64 - 2.0))
        .collect()
}

#[test]
fn round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("concepts.bin");
    let cs = five();
    save_concepts(&path, &cs).unwrap();
    let back = load_concepts(&path).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in cs.iter().zip(&back) {
        assert_close(a, b);
        let n: f64 = b.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
    }
    assert_eq!(back[1].metrics[1].specificity, None);
}

#[test]
fn encoding_is_stable() {
    let cs = five();
    let a = encode_concepts(&cs).unwrap();
    let b = encode_concepts(&decode_concepts(&a).unwrap()).unwrap();
    assert_eq!(a, b);
    // header plus per record: name, dim, 512 f32 + 512 f64, bias, lambda,
    // metric rows, fingerprint
    let names: usize = BinaryTask::ALL.iter().map(|t| 2 + t.as_str().len()).sum();
    let per = 4 + 512 * 12 + 16 + 1 + 2 * (1 + 5 * 8 + 3 * 8) + 32;
    assert_eq!(a.len(), 12 + names + 5 * per);
}

#[test]
fn rejects_malformed_input() {
    let good = encode_concepts(&five()[..1]).unwrap();
    let format = |r: Result<Vec<ConceptVector>, Error>| matches!(r, Err(Error::Format { .. }));

    assert!(format(decode_concepts(b"")));
    assert!(format(decode_concepts(b"XLCV\x01\0\0\0\0\0\0\0")));
    for cut in [5, 12, 20, good.len() - 1] {
        assert!(format(decode_concepts(&good[..cut])), "cut {cut}");
    }
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(format(decode_concepts(&trailing)));

    let mut newer = good.clone();
    newer[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(decode_concepts(&newer), Err(Error::UnsupportedVersion { .. })));

    let mut unknown = good.clone();
    unknown[14] = b'X';
    assert!(format(decode_concepts(&unknown)));

    let mut huge_dim = good.clone();
    let at = 12 + 2 + BinaryTask::ALL[0].as_str().len();
    huge_dim[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(format(decode_concepts(&huge_dim)));

    let mut dup = encode_concepts(&[five()[0].clone(), five()[0].clone()]).unwrap();
    assert!(format(decode_concepts(&dup)));
    dup[8..12].copy_from_slice(&1u32.to_le_bytes());
    assert!(format(decode_concepts(&dup)));
}

#[test]
fn empty_store_is_valid() {
    let bytes = encode_concepts(&[]).unwrap();
    assert_eq!(bytes.len(), 12);
    assert!(decode_concepts(&bytes).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_concepts_round_trip(
        raw in prop::collection::vec(-100.0f64..100.0, 1..40),
        bias in -1e6f64..1e6,
        task in 0usize..5,
    ) {
        prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
        let c = concept(BinaryTask::ALL[task], raw, bias);
        let back = decode_concepts(&encode_concepts(std::slice::from_ref(&c)).unwrap()).unwrap();
        assert_close(&c, &back[0]);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut with_magic = b"ALCV\x01\0\0\0".to_vec();
        with_magic.extend_from_slice(&bytes);
        let _ = decode_concepts(&bytes);
        let _ = decode_concepts(&with_magic);
    }
}
