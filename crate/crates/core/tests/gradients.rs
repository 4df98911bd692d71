mod common;

use common::{check_params, max_rel_err, numeric_input_grad, wavy};
use ndarray::{Array2, Array4, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use staged_alae::alae::{
    discriminator_grads, discriminator_loss_grad, generator_grads, generator_loss_grad, image_recon_grads,
    latent_recon_grads, loss_discriminator, loss_generator, mse_loss_grad, r1_penalty, r1_penalty_grads, Alae,
};
use staged_alae::autoencoder::{mae_loss, mae_loss_grad, Autoencoder, StageSchedule, TrainScope};
use staged_alae::nn::{
    avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, relu, relu_backward, tanh, tanh_backward,
    upsample2, upsample2_backward, Activation, BatchNorm2d, Conv2d, Linear, Mlp, Mode, ResidualBlock,
};

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted<D: ndarray::Dimension>(y: &ndarray::Array<f64, D>, r: &ndarray::Array<f64, D>) -> f64 {
    (y * r).sum()
}

/// Projection weights scaled by `1/len`, which keeps the projected loss
/// O(1) so the oracle's absolute floor sits well above rounding noise.
fn probe<D: ndarray::Dimension>(shape: D, salt: f64) -> ndarray::Array<f64, D> {
    let w = wavy(shape, salt);
    let n = w.len() as f64;
    w / n
}

fn assert_report(what: &str, rep: common::Report, tol: f64) {
    assert!(
        rep.worst <= tol,
        "{what}: worst relative error {:.3e} at {} ({} entries checked)",
        rep.worst,
        rep.worst_at,
        rep.checked
    );
}

#[test]
fn conv2d_parameter_and_input_gradients() {
    for k in [1, 3] {
        let mut conv = Conv2d::<f64>::new(k, 3, 4, &mut rng(1));
        let x: Array4<f64> = wavy(Ix4(2, 6, 6, 3), 1.0);
        let r: Array4<f64> = probe(Ix4(2, 6, 6, 4), 2.0);
        let rep = check_params(
            &mut conv,
            |_| true,
            usize::MAX,
            |c| {
                let (_, cache) = c.forward(&x).unwrap();
                c.backward(&cache, &r, true);
            },
            |c| weighted(&c.infer(&x).unwrap(), &r),
        );
        assert_report("conv params", rep, 1e-5);

        let (_, cache) = conv.forward(&x).unwrap();
        let dx = conv.clone().backward(&cache, &r, false);
        let num = numeric_input_grad(&x, |x| weighted(&conv.infer(x).unwrap(), &r));
        assert!(max_rel_err(&dx, &num) <= 1e-5);
    }
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut bn = BatchNorm2d::<f64>::new(3);
    let x: Array4<f64> = wavy(Ix4(3, 4, 4, 3), 3.0);
    let r: Array4<f64> = probe(Ix4(3, 4, 4, 3), 4.0);
    // gamma/beta away from their identity init
    bn.gamma.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.7 + 0.2 * i as f64);
    bn.beta.value.iter_mut().enumerate().for_each(|(i, v)| *v = -0.3 + 0.25 * i as f64);
    let rep = check_params(
        &mut bn,
        |_| true,
        usize::MAX,
        |b| {
            let (_, cache) = b.forward(&x, Mode::Train).unwrap();
            b.backward(&cache, &r, true);
        },
        |b| weighted(&b.forward(&x, Mode::Train).unwrap().0, &r),
    );
    assert_report("batchnorm params", rep, TOL);

    for mode in [Mode::Train, Mode::Infer] {
        let mut b = bn.clone();
        let (_, cache) = b.forward(&x, mode).unwrap();
        let dx = b.backward(&cache, &r, false);
        let num = numeric_input_grad(&x, |x| weighted(&bn.clone().forward(x, mode).unwrap().0, &r));
        assert!(max_rel_err(&dx, &num) <= TOL, "{mode:?}");
    }
}

#[test]
fn linear_and_mlp_gradients() {
    let x: Array2<f64> = wavy(Ix2(5, 6), 5.0);
    let mut lin = Linear::<f64>::new(6, 4, 1.0, &mut rng(2));
    let r: Array2<f64> = probe(Ix2(5, 4), 6.0);
    let rep = check_params(
        &mut lin,
        |_| true,
        usize::MAX,
        |l| {
            let (_, c) = l.forward(&x).unwrap();
            l.backward(&c, &r, true);
        },
        |l| weighted(&l.infer(&x).unwrap(), &r),
    );
    assert_report("linear", rep, 1e-5);

    for act in [Activation::LeakyRelu(0.2), Activation::Relu] {
        let mut mlp = Mlp::<f64>::new(&[6, 7, 7, 3], act, &mut rng(3));
        let r: Array2<f64> = probe(Ix2(5, 3), 7.0);
        let rep = check_params(
            &mut mlp,
            |_| true,
            usize::MAX,
            |m| {
                let (_, c) = m.forward(&x).unwrap();
                m.backward(&c, &r, true);
            },
            |m| weighted(&m.infer(&x).unwrap(), &r),
        );
        assert_report("mlp", rep, 1e-5);
        let (_, c) = mlp.forward(&x).unwrap();
        let dx = mlp.clone().backward(&c, &r, false);
        let num = numeric_input_grad(&x, |x| weighted(&mlp.infer(x).unwrap(), &r));
        assert!(max_rel_err(&dx, &num) <= 1e-5);
    }
}

#[test]
fn elementwise_and_resampling_gradients() {
    let x: Array4<f64> = wavy(Ix4(2, 4, 4, 2), 8.0);
    let r: Array4<f64> = probe(Ix4(2, 4, 4, 2), 9.0);
    let cases: Vec<(&str, Box<dyn Fn(&Array4<f64>) -> Array4<f64>>, Array4<f64>)> = vec![
        (
            "leaky",
            Box::new(|x| leaky_relu(x, 0.2)),
            leaky_relu_backward(&leaky_relu(&x, 0.2), &r, 0.2),
        ),
        ("relu", Box::new(relu), relu_backward(&relu(&x), &r)),
        ("tanh", Box::new(tanh), tanh_backward(&tanh(&x), &r)),
    ];
    for (name, f, analytic) in cases {
        let num = numeric_input_grad(&x, |x| weighted(&f(x), &r));
        assert!(max_rel_err(&analytic, &num) <= 1e-6, "{name}");
    }

    let rp: Array4<f64> = probe(Ix4(2, 2, 2, 2), 10.0);
    let num = numeric_input_grad(&x, |x| weighted(&avg_pool2(x).unwrap(), &rp));
    assert!(max_rel_err(&avg_pool2_backward(&rp), &num) <= 1e-6);

    let ru: Array4<f64> = probe(Ix4(2, 8, 8, 2), 11.0);
    let num = numeric_input_grad(&x, |x| weighted(&upsample2(x), &ru));
    assert!(max_rel_err(&upsample2_backward(&ru), &num) <= 1e-6);
}

#[test]
fn residual_block_kernel_gradients() {
    for (cin, cout) in [(4, 4), (3, 5)] {
        let mut block = ResidualBlock::<f64>::new(cin, cout, &mut rng(4));
        let x: Array4<f64> = wavy(Ix4(2, 6, 6, cin), 12.0);
        let ones = Array4::<f64>::ones((2, 6, 6, cout));
        let rep = check_params(
            &mut block,
            |n| n.ends_with("weight") && !n.contains("norm"),
            usize::MAX,
            |b| {
                let (_, c) = b.forward(&x, Mode::Train).unwrap();
                b.backward(&c, &ones, true);
            },
            |b| b.forward(&x, Mode::Train).unwrap().0.sum(),
        );
        assert_report("residual kernels (output sum)", rep, 1e-5);

        let r: Array4<f64> = probe(Ix4(2, 6, 6, cout), 13.0);
        let rep = check_params(
            &mut block,
            |_| true,
            usize::MAX,
            |b| {
                let (_, c) = b.forward(&x, Mode::Train).unwrap();
                b.backward(&c, &r, true);
            },
            |b| weighted(&b.forward(&x, Mode::Train).unwrap().0, &r),
        );
        assert_report("residual all params", rep, TOL);
    }
}

#[test]
fn mae_gradient_is_sign_over_n() {
    let x: Array4<f64> = wavy(Ix4(1, 3, 3, 3), 14.0);
    let xp: Array4<f64> = wavy(Ix4(1, 3, 3, 3), 15.0);
    let (_, g) = mae_loss_grad(&x, &xp).unwrap();
    let num = numeric_input_grad(&xp, |xp| mae_loss(&x, xp).unwrap());
    assert!(max_rel_err(&g, &num) <= 1e-6);
    let n = x.len() as f64;
    for ((&a, &b), &gi) in x.iter().zip(xp.iter()).zip(g.iter()) {
        assert_eq!(gi, (b - a).signum() / n);
    }
}

fn toy_autoencoder() -> Autoencoder<f64> {
    Autoencoder::new(StageSchedule::custom(16, 4, &[4, 4]).unwrap(), 21)
}

fn ae_loss(ae: &mut Autoencoder<f64>, x: &Array4<f64>, k: usize, scope: TrainScope) -> f64 {
    let (t, _) = ae.encode_train(x, k, scope).unwrap();
    let (y, _) = ae.decode_train(&t, k, scope).unwrap();
    mae_loss(x, &y).unwrap()
}

#[test]
fn autoencoder_mae_pipeline_gradients() {
    let mut ae = toy_autoencoder();
    let x: Array4<f64> = wavy(Ix4(2, 16, 16, 3), 16.0);
    let k = ae.stages();
    let rep = check_params(
        &mut ae,
        |_| true,
        24,
        |ae| {
            let (t, enc) = ae.encode_train(&x, k, TrainScope::All).unwrap();
            let (y, dec) = ae.decode_train(&t, k, TrainScope::All).unwrap();
            let (_, dy) = mae_loss_grad(&x, &y).unwrap();
            let dt = ae.decode_backward(&dec, &dy, TrainScope::All);
            ae.encode_backward(&enc, &dt, TrainScope::All, 0);
        },
        |ae| ae_loss(ae, &x, k, TrainScope::All),
    );
    assert_report("autoencoder", rep, TOL);
}

#[test]
fn autoencoder_stage_scope_gradients() {
    // stage 2 trained on top of a locked stage 1 (which runs in infer mode)
    let mut ae = toy_autoencoder();
    let x: Array4<f64> = wavy(Ix4(2, 16, 16, 3), 17.0);
    let scope = TrainScope::Stage(2);
    let rep = check_params(
        &mut ae,
        |n| n.starts_with("encoder.2") || n.starts_with("decoder.2"),
        24,
        |ae| {
            let (t, enc) = ae.encode_train(&x, 2, scope).unwrap();
            let (y, dec) = ae.decode_train(&t, 2, scope).unwrap();
            let (_, dy) = mae_loss_grad(&x, &y).unwrap();
            let dt = ae.decode_backward(&dec, &dy, scope);
            ae.encode_backward(&enc, &dt, scope, 2);
        },
        |ae| ae_loss(ae, &x, 2, scope),
    );
    assert_report("stage 2", rep, TOL);
}

#[test]
fn adversarial_loss_gradients() {
    let real: Array2<f64> = wavy(Ix2(6, 1), 18.0) * 3.0;
    let fake: Array2<f64> = wavy(Ix2(6, 1), 19.0) * 3.0;
    let batch_d = |r: &Array2<f64>, f: &Array2<f64>| {
        r.iter().zip(f.iter()).map(|(&a, &b)| loss_discriminator(a, b)).sum::<f64>() / r.len() as f64
    };
    let (l, dr, df) = discriminator_loss_grad(&real, &fake);
    assert!((l - batch_d(&real, &fake)).abs() < 1e-12);
    assert!(max_rel_err(&dr, &numeric_input_grad(&real, |r| batch_d(r, &fake))) <= 1e-6);
    assert!(max_rel_err(&df, &numeric_input_grad(&fake, |f| batch_d(&real, f))) <= 1e-6);

    let (l, dg) = generator_loss_grad(&fake);
    let batch_g = |f: &Array2<f64>| f.iter().map(|&v| loss_generator(v)).sum::<f64>() / f.len() as f64;
    assert!((l - batch_g(&fake)).abs() < 1e-12);
    assert!(max_rel_err(&dg, &numeric_input_grad(&fake, batch_g)) <= 1e-6);
    // d/dl softplus(-l) = -sigmoid(-l)
    for (&f, &g) in fake.iter().zip(dg.iter()) {
        let expected = -1.0 / (1.0 + f.exp()) / fake.len() as f64;
        assert!((g - expected).abs() < 1e-15);
    }

    let w: Array2<f64> = wavy(Ix2(3, 5), 20.0);
    let wc: Array2<f64> = wavy(Ix2(3, 5), 21.0);
    let (_, g) = mse_loss_grad(&w, &wc);
    let num = numeric_input_grad(&wc, |wc| mse_loss_grad(&w, wc).0);
    assert!(max_rel_err(&g, &num) <= 1e-6);
}

fn toy_alae() -> Alae<f64> {
    let ae = Autoencoder::new(StageSchedule::custom(16, 4, &[4, 4]).unwrap(), 22);
    Alae::from_autoencoder(ae, 6, 23)
}

fn phase2_batch() -> (Array4<f64>, Array2<f64>) {
    (wavy(Ix4(2, 16, 16, 3), 24.0) * 0.9, wavy(Ix2(2, 6), 25.0) * 1.5)
}

fn heads(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |n| prefixes.iter().any(|p| n.starts_with(p))
}

#[test]
fn phase2_discriminator_gradients() {
    let mut m = toy_alae();
    let (x, z) = phase2_batch();
    let rep = check_params(
        &mut m,
        heads(&["e_head", "disc"]),
        40,
        |m| {
            discriminator_grads(m, &x, &z).unwrap();
        },
        |m| discriminator_grads(m, &x, &z).unwrap(),
    );
    assert_report("discriminator loss", rep, TOL);
}

#[test]
fn phase2_generator_gradients() {
    let mut m = toy_alae();
    let (_, z) = phase2_batch();
    let rep = check_params(
        &mut m,
        heads(&["mapping", "g_head"]),
        40,
        |m| {
            generator_grads(m, &z).unwrap();
        },
        |m| generator_grads(m, &z).unwrap(),
    );
    assert_report("generator loss", rep, TOL);
}

#[test]
fn phase2_reconstruction_gradients() {
    let (x, z) = phase2_batch();
    let mut m = toy_alae();
    let w = m.map_f(&z).unwrap();
    let rep = check_params(
        &mut m,
        heads(&["g_head", "e_head"]),
        40,
        |m| {
            latent_recon_grads(m, &w, true).unwrap();
        },
        |m| latent_recon_grads(m, &w, true).unwrap(),
    );
    assert_report("latent reconstruction", rep, TOL);

    let rep = check_params(
        &mut m,
        heads(&["g_head", "e_head"]),
        40,
        |m| {
            image_recon_grads(m, &x, true).unwrap();
        },
        |m| image_recon_grads(m, &x, true).unwrap(),
    );
    assert_report("image reconstruction", rep, TOL);
}

#[test]
fn phase2_r1_gradients() {
    let mut m = toy_alae();
    let (x, _) = phase2_batch();
    let gamma = 10.0;
    let rep = check_params(
        &mut m,
        heads(&["e_head", "disc"]),
        40,
        |m| {
            r1_penalty_grads(m, &x, gamma, 1e-5).unwrap();
        },
        |m| r1_penalty(m, &x, gamma).unwrap(),
    );
    assert_report("r1 penalty", rep, TOL);
}
