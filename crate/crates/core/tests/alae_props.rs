use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use staged_alae::alae::{
    ema_update, loss_discriminator, loss_generator, sample_normal, sample_z, Alae, AlaeConfig, AlaeTrainer,
    ReconSpace,
};
use staged_alae::autoencoder::{Autoencoder, StageSchedule};
use staged_alae::nn::{checksum, Linear, Param, Parameterized};

fn toy(latent: usize, seed: u64) -> Alae<f32> {
    let ae = Autoencoder::new(StageSchedule::custom(16, 4, &[8, 8]).unwrap(), seed);
    Alae::from_autoencoder(ae, latent, seed + 1)
}

fn images(n: usize, salt: f32) -> Array4<f32> {
    Array4::from_shape_fn((n, 16, 16, 3), |(b, y, x, c)| {
        (((b * 131 + y * 17 + x * 5 + c) as f32) * 0.37 + salt).sin() * 0.8
    })
}

fn head_checksums(m: &Alae<f32>) -> [String; 4] {
    [checksum(&m.mapping), checksum(&m.e_head), checksum(&m.g_head), checksum(&m.disc)]
}

fn config(recon_space: ReconSpace, r1_gamma: f64) -> AlaeConfig {
    AlaeConfig {
        lr: 1e-3,
        recon_space,
        r1_gamma,
        latent_dim: 8,
        ..AlaeConfig::default()
    }
}

#[test]
fn training_leaves_conv_stacks_frozen_and_moves_every_head() {
    for (space, gamma) in [(ReconSpace::Latent, 0.0), (ReconSpace::Image, 0.0), (ReconSpace::Latent, 5.0)] {
        let mut m = toy(8, 3);
        let frozen = m.frozen_checksum();
        let heads = head_checksums(&m);
        let mut tr = AlaeTrainer::new(&m, config(space, gamma), 11).unwrap();
        for i in 0..3 {
            let losses = tr.step(&mut m, &images(4, i as f32)).unwrap();
            assert!(losses.discriminator.is_finite() && losses.generator.is_finite());
            assert!(losses.reconstruction >= 0.0);
            assert_eq!(losses.r1 > 0.0, gamma > 0.0);
        }
        assert_eq!(m.frozen_checksum(), frozen, "{space:?}");
        let after = head_checksums(&m);
        for (a, b) in heads.iter().zip(&after) {
            assert_ne!(a, b);
        }
        assert_eq!(tr.steps, 3);
    }
}

#[test]
fn ema_shadow_tracks_mapping_and_g_head_only() {
    let mut m = toy(8, 4);
    let mut tr = AlaeTrainer::new(&m, config(ReconSpace::Latent, 0.0), 1).unwrap();
    let start = (checksum(&tr.ema.mapping), checksum(&tr.ema.g_head));
    tr.step(&mut m, &images(2, 0.5)).unwrap();
    assert_ne!(checksum(&tr.ema.mapping), start.0);
    assert_ne!(checksum(&tr.ema.g_head), start.1);
    // decay 0.999: the shadow sits 0.1% of the way to the live weights
    let mut expected = tr.ema.mapping.clone();
    let original = toy(8, 4).mapping;
    let mut live = Vec::new();
    m.mapping.visit("", &mut |_, p| live.push(p.value.clone()));
    let mut i = 0;
    let mut orig = Vec::new();
    original.visit("", &mut |_, p| orig.push(p.value.clone()));
    expected.visit_mut("", &mut |_, p: &mut Param<f32>| {
        p.value = &orig[i] * 0.999 + &live[i] * 0.001;
        i += 1;
    });
    let mut got = Vec::new();
    tr.ema.mapping.visit("", &mut |_, p| got.push(p.value.clone()));
    let mut want = Vec::new();
    expected.visit("", &mut |_, p| want.push(p.value.clone()));
    for (g, w) in got.iter().zip(&want) {
        let diff = (g - w).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(diff < 1e-6);
    }
}

#[test]
fn with_ema_swaps_generation_weights() {
    let m = toy(8, 5);
    let tr = AlaeTrainer::new(&m, config(ReconSpace::Latent, 0.0), 1).unwrap();
    let ema_model = m.with_ema(&tr.ema);
    let w = Array2::from_elem((1, 8), 0.3f32);
    assert_eq!(ema_model.generate_g(&w).unwrap(), m.generate_g(&w).unwrap());
    assert_eq!(ema_model.frozen_checksum(), m.frozen_checksum());
}

#[test]
fn equal_seeds_train_identically() {
    let run = || {
        let mut m = toy(8, 6);
        let mut tr = AlaeTrainer::new(&m, config(ReconSpace::Latent, 0.0), 42).unwrap();
        let mut losses = Vec::new();
        for i in 0..2 {
            losses.push(tr.step(&mut m, &images(3, i as f32)).unwrap());
        }
        (checksum(&m), checksum(&tr.ema), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn ema_closed_form() {
    // shadow0 = 0, constant live c, decay d, n updates -> c (1 - d^n)
    let mut shadow = Linear::<f64>::zeros(2, 1);
    let mut live = Linear::<f64>::zeros(2, 1);
    live.weight.value.fill(2.5);
    live.bias.value.fill(-4.0);
    for _ in 0..5 {
        ema_update(&mut shadow, &live, 0.9);
    }
    for v in shadow.weight.value.iter() {
        assert!((v - 2.5 * 0.40951).abs() <= 1e-12);
    }
    assert!((shadow.bias.value[[0]] + 4.0 * 0.40951).abs() <= 1e-12);
}

#[test]
fn prior_samples_are_standard_normal() {
    let z = sample_z(10_000, 7).unwrap();
    let a = staged_alae::alae::LatentZ::stack(&z).mapv(f64::from);
    let mean: Array1<f64> = a.mean_axis(ndarray::Axis(0)).unwrap();
    let var: Array1<f64> = a.var_axis(ndarray::Axis(0), 1.0);
    assert_eq!(mean.len(), 512);
    assert!(mean.iter().all(|m| m.abs() <= 0.05));
    // 512 coordinates at roughly 3.5 sigma each: a handful of single
    // coordinates may stray past the bound, the pooled estimate may not.
    let pooled = var.mean().unwrap();
    assert!((pooled - 1.0).abs() <= 0.05);
    let outside = var.iter().filter(|v| (*v - 1.0).abs() > 0.05).count();
    assert!(outside * 100 <= var.len(), "{outside} coordinates outside the bound");
}

#[test]
fn softplus_identity_on_grid() {
    for i in 0..10 {
        for j in 0..10 {
            let l = -20.0 + 40.0 * i as f64 / 9.0;
            let lp = -20.0 + 40.0 * j as f64 / 9.0;
            let lhs = loss_discriminator(l, lp);
            let rhs = loss_generator(l) + loss_generator(-lp);
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn ema_twice_equals_once_with_squared_decay(
        vals in prop::collection::vec(-10.0f64..10.0, 6),
        live_vals in prop::collection::vec(-10.0f64..10.0, 6),
        d in 0.0f64..1.0,
    ) {
        let mut a = Linear::<f64>::zeros(2, 2);
        a.weight.value.iter_mut().zip(&vals).for_each(|(v, x)| *v = *x);
        a.bias.value.iter_mut().zip(&vals[4..]).for_each(|(v, x)| *v = *x);
        let mut live = Linear::<f64>::zeros(2, 2);
        live.weight.value.iter_mut().zip(&live_vals).for_each(|(v, x)| *v = *x);
        live.bias.value.iter_mut().zip(&live_vals[4..]).for_each(|(v, x)| *v = *x);
        let mut b = a.clone();
        ema_update(&mut a, &live, d);
        ema_update(&mut a, &live, d);
        ema_update(&mut b, &live, d * d);
        for (x, y) in a.weight.value.iter().zip(b.weight.value.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn discriminator_loss_splits_into_generator_terms(l in -50.0f64..50.0, lp in -50.0f64..50.0) {
        let lhs = loss_discriminator(l, lp);
        prop_assert!((lhs - (loss_generator(l) + loss_generator(-lp))).abs() <= 1e-12 * lhs.max(1.0));
        prop_assert!(lhs > 0.0);
    }

    #[test]
    fn inference_paths_are_pure(seed in 0u64..100) {
        let m = toy(8, seed);
        let before = checksum(&m);
        let x = images(2, seed as f32);
        let w = m.encode_e(&x).unwrap();
        prop_assert_eq!(&w, &m.encode_e(&x).unwrap());
        let z = sample_normal::<f32>(2, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let img = m.generate_g(&m.map_f(&z).unwrap()).unwrap();
        prop_assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(m.discriminate(&w).unwrap().dim(), (2, 1));
        prop_assert_eq!(checksum(&m), before);
    }
}
