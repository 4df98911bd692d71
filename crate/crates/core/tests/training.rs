use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD};
use proptest::prelude::*;
use staged_alae::autoencoder::{
    build_schedule, finetune_all, mae_loss, scope_of, train_stage_greedy, Autoencoder, StageSchedule, TrainScope,
};
use staged_alae::dataset::{synthetic_in_memory, ImageSet};
use staged_alae::nn::Parameterized;

fn small_schedule() -> StageSchedule {
    build_schedule(32).unwrap().narrowed(16).unwrap()
}

fn snapshot(ae: &Autoencoder<f32>, keep: impl Fn(usize) -> bool) -> BTreeMap<String, ArrayD<f32>> {
    let mut out = BTreeMap::new();
    ae.visit("", &mut |name, p| {
        if keep(scope_of(name).expect("autoencoder names carry a stage")) {
            out.insert(name.to_string(), p.value.clone());
        }
    });
    out
}

fn synthetic(n: usize, seed: u64) -> ImageSet {
    synthetic_in_memory(n, 32, seed).unwrap().1
}

#[test]
fn greedy_stages_only_touch_their_own_parameters() {
    let data = synthetic(16, 1);
    let mut ae = Autoencoder::<f32>::new(small_schedule(), 3);
    assert_eq!(ae.stages(), 2);

    let other_than_1 = snapshot(&ae, |p| p == 2);
    let before_1 = snapshot(&ae, |p| p <= 1);
    let history = train_stage_greedy(&mut ae, 1, &data, 2, 1e-3, 8, 5).unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(snapshot(&ae, |p| p == 2), other_than_1);
    assert_ne!(snapshot(&ae, |p| p <= 1), before_1);

    let locked = snapshot(&ae, |p| p <= 1);
    let before_2 = snapshot(&ae, |p| p == 2);
    train_stage_greedy(&mut ae, 2, &data, 1, 1e-3, 8, 5).unwrap();
    // bit-identical, running statistics included
    assert_eq!(snapshot(&ae, |p| p <= 1), locked);
    assert_ne!(snapshot(&ae, |p| p == 2), before_2);
}

/// Stage-1 MAE of one batch in training mode (batch statistics), on a
/// throwaway copy so running statistics are untouched.
fn training_mae(ae: &Autoencoder<f32>, x: &Array4<f32>) -> f32 {
    let mut ae = ae.clone();
    let scope = TrainScope::Stage(1);
    let (t, _) = ae.encode_train(x, 1, scope).unwrap();
    let (y, _) = ae.decode_train(&t, 1, scope).unwrap();
    mae_loss(x, &y).unwrap()
}

#[test]
fn one_epoch_on_constant_data_lowers_training_mae() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let mut images = Array4::<f32>::zeros((32, 32, 32, 3));
        for (c, v) in [0.4f32, -0.3, 0.6].iter().enumerate() {
            images.slice_mut(ndarray::s![.., .., .., c]).fill(*v);
        }
        let data = ImageSet {
            ids: (0..32).map(|i| i.to_string()).collect(),
            images,
        };
        let mut ae = Autoencoder::<f32>::new(small_schedule(), seed);
        let before = training_mae(&ae, &data.images);
        train_stage_greedy(&mut ae, 1, &data, 1, 1e-3, 8, seed).unwrap();
        let after = training_mae(&ae, &data.images);
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 9, "MAE decreased in only {wins}/10 seeds");
}

#[test]
fn finetuning_does_not_hurt_validation_mae() {
    let mut staged = Vec::new();
    let mut tuned = Vec::new();
    for seed in 0..5u64 {
        let all = synthetic(64, 100 + seed);
        let train = all.subset(&(0..48).collect::<Vec<_>>());
        let val = all.subset(&(48..64).collect::<Vec<_>>());
        let mut ae = Autoencoder::<f32>::new(small_schedule(), seed);
        for k in 1..=ae.stages() {
            train_stage_greedy(&mut ae, k, &train, 3, 1e-3, 8, seed).unwrap();
        }
        staged.push(ae.evaluate_mae(&val, ae.stages(), 16).unwrap());
        finetune_all(&mut ae, &train, 2, 1e-4, 8, seed).unwrap();
        tuned.push(ae.evaluate_mae(&val, ae.stages(), 16).unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (s, t) = (median(&mut staged), median(&mut tuned));
    assert!(t <= s, "fine-tuned median {t} > staged median {s}");
}

#[test]
fn training_is_deterministic() {
    let data = synthetic(16, 9);
    let run = || {
        let mut ae = Autoencoder::<f32>::new(small_schedule(), 4);
        train_stage_greedy(&mut ae, 1, &data, 1, 1e-3, 8, 4).unwrap();
        staged_alae::nn::checksum(&ae)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decode_of_encode_keeps_shape(k in 0usize..=2, batch in 1usize..=3, seed in 0u64..1000) {
        let ae = Autoencoder::<f32>::new(small_schedule(), seed);
        let x = Array4::<f32>::from_shape_fn((batch, 32, 32, 3), |(b, y, x, c)| {
            (((b * 31 + y * 7 + x * 3 + c) as f32) * 0.173 + seed as f32).sin()
        });
        let t = ae.encode_to_stage(&x, k).unwrap();
        let y = ae.decode_from_stage(&t, k).unwrap();
        prop_assert_eq!(y.dim(), x.dim());
        prop_assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn inference_never_moves_running_statistics(seed in 0u64..1000, k in 1usize..=2) {
        let ae = Autoencoder::<f32>::new(small_schedule(), seed);
        let before = staged_alae::nn::checksum(&ae);
        let x = Array4::<f32>::from_elem((2, 32, 32, 3), (seed as f32 * 0.01).sin());
        ae.decode_from_stage(&ae.encode_to_stage(&x, k).unwrap(), k).unwrap();
        prop_assert_eq!(staged_alae::nn::checksum(&ae), before);
    }
}
