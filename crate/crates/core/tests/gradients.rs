//! Analytic gradients against central finite differences on miniature nets.

use crossview_core::aae::{wgan_losses, Aae};
use crossview_core::backbone::{mse_with_grad, BackboneConfig, VolumeStage};
use crossview_core::contrast::{
    conditional_loss, conditional_with_grad, joint_probability, mutual_info_loss,
    mutual_info_with_grad, ContrastConfig, ContrastNetConfig, ContrastNets, PairingMode,
};
use crossview_core::nn::gradcheck::{jitter, max_input_error, max_param_error};
use crossview_core::nn::{
    AdaptiveAvgPool, BatchNorm, Conv, ConvTranspose, Layer, Linear, Mode, Module,
};
use crossview_core::rng;
use crossview_core::tensor::Tensor;
use crossview_core::vae::{kl_from_logvar, Vae};
use rand::Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-4;
const BATCH: usize = 8;
const SIDE: usize = 5;

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        volume_stages: vec![VolumeStage {
            depth_kernel: 1,
            spatial_kernel: 3,
            channels: 2,
        }],
        plane_kernel: 3,
        plane_channels: 3,
        pool: 1,
        hidden: 6,
        latent: 4,
    }
}

fn normal(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn tensor(r: &mut rng::Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal(r, n)).unwrap()
}

#[test]
fn mse_term_gradient() {
    let mut r = rng::seeded(11);
    let pred = tensor(&mut r, vec![BATCH, 6]);
    let target = normal(&mut r, pred.len());
    let (_, grad) = mse_with_grad(&pred, &target);
    let err = max_input_error(pred.data(), grad.data(), |p| {
        let t = Tensor::new(pred.shape().to_vec(), p.to_vec()).unwrap();
        mse_with_grad(&t, &target).0
    });
    assert!(err < TOL, "mse gradient error {err}");
}

#[test]
fn kl_term_gradient() {
    let mut r = rng::seeded(12);
    let mu = normal(&mut r, BATCH * 4);
    let logvar: Vec<f64> = normal(&mut r, BATCH * 4).iter().map(|v| 0.5 * v).collect();
    let (_, dmu, dlv) = kl_from_logvar(&mu, &logvar, BATCH);
    let err_mu = max_input_error(&mu, &dmu, |m| kl_from_logvar(m, &logvar, BATCH).0);
    let err_lv = max_input_error(&logvar, &dlv, |l| kl_from_logvar(&mu, l, BATCH).0);
    assert!(err_mu < TOL && err_lv < TOL, "kl errors {err_mu} {err_lv}");
}

fn vae_case(seed: u64) -> (Vae, Tensor, Vec<f64>, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let mut vae = Vae::new(tiny_backbone(), SIDE, 2, 2, seed).unwrap();
    jitter(&mut vae, seed + 100);
    let x = tensor(&mut r, vec![BATCH, 1, 2, SIDE, SIDE]);
    let target = normal(&mut r, BATCH * 2 * SIDE * SIDE);
    let noise = normal(&mut r, BATCH * 4);
    (vae, x, target, noise)
}

#[test]
fn vae_reconstruction_and_divergence_gradients() {
    let (mut vae, x, target, noise) = vae_case(21);
    vae.zero_grad();
    vae.step(&x, &target, &noise, Mode::Frozen).unwrap();
    let grads = vae.flat_grads();
    let err = max_param_error(&mut vae, &grads, |_| true, |m| {
        m.evaluate(&x, &target, &noise, Mode::Frozen).unwrap().total()
    });
    assert!(err < TOL, "vae gradient error {err}");
}

fn aae_case(seed: u64) -> (Aae, Tensor, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let mut aae = Aae::new(tiny_backbone(), &[5, 3], SIDE, 2, 2, seed).unwrap();
    jitter(&mut aae, seed + 100);
    let x = tensor(&mut r, vec![BATCH, 1, 2, SIDE, SIDE]);
    let target = normal(&mut r, BATCH * 2 * SIDE * SIDE);
    (aae, x, target)
}

fn critic_offset(aae: &Aae) -> usize {
    aae.encoder.num_values() + aae.head.num_values() + aae.decoder.num_values()
}

#[test]
fn aae_reconstruction_gradient() {
    let (mut aae, x, target) = aae_case(31);
    aae.zero_grad();
    aae.reconstruction_step(&x, &target, Mode::Frozen).unwrap();
    let grads = aae.flat_grads();
    let stop = critic_offset(&aae);
    let err = max_param_error(&mut aae, &grads, |i| i < stop, |m| {
        m.reconstruction_loss(&x, &target, Mode::Frozen).unwrap()
    });
    assert!(err < TOL, "aae reconstruction gradient error {err}");
    assert!(grads[stop..].iter().all(|g| *g == 0.0));
}

#[test]
fn critic_objective_gradient() {
    let (mut aae, x, _) = aae_case(32);
    let mut r = rng::seeded(33);
    let real = tensor(&mut r, vec![BATCH, 4]);
    let fake = aae.encode_with(&x, Mode::Frozen).unwrap();
    aae.zero_grad();
    aae.critic_step(&real, &fake).unwrap();
    let grads = aae.flat_grads();
    let start = critic_offset(&aae);
    assert!(grads[..start].iter().all(|g| *g == 0.0));
    let err = max_param_error(&mut aae, &grads, |i| i >= start, |m| {
        let dr = m.critic.infer(real.clone(), Mode::Frozen).unwrap();
        let df = m.critic.infer(fake.clone(), Mode::Frozen).unwrap();
        wgan_losses(dr.data(), df.data()).unwrap().d_loss
    });
    assert!(err < TOL, "critic gradient error {err}");
}

#[test]
fn generator_objective_gradient() {
    let (mut aae, x, _) = aae_case(34);
    aae.zero_grad();
    aae.generator_step(&x, Mode::Frozen).unwrap();
    let grads = aae.flat_grads();
    let enc = aae.encoder.num_values() + aae.head.num_values();
    assert!(grads[enc..].iter().all(|g| *g == 0.0));
    let err = max_param_error(&mut aae, &grads, |i| i < enc, |m| {
        let z = m.encode_with(&x, Mode::Frozen).unwrap();
        let d = m.critic.infer(z, Mode::Frozen).unwrap();
        -d.data().iter().sum::<f64>() / d.len() as f64
    });
    assert!(err < TOL, "generator gradient error {err}");
}

#[test]
fn mutual_info_term_gradient() {
    let mut r = rng::seeded(41);
    for alpha in [0.0, 1.0, 9.0] {
        let z1 = tensor(&mut r, vec![BATCH, 6]);
        let z2 = tensor(&mut r, vec![BATCH, 6]);
        let (_, g1, g2) = mutual_info_with_grad(&z1, &z2, alpha).unwrap();
        let shape = z1.shape().to_vec();
        let loss = |a: &[f64], b: &[f64]| {
            let a = Tensor::new(shape.clone(), a.to_vec()).unwrap();
            let b = Tensor::new(shape.clone(), b.to_vec()).unwrap();
            mutual_info_loss(&joint_probability(&a, &b).unwrap(), alpha)
        };
        let e1 = max_input_error(z1.data(), g1.data(), |a| loss(a, z2.data()));
        let e2 = max_input_error(z2.data(), g2.data(), |b| loss(z1.data(), b));
        assert!(e1 < TOL && e2 < TOL, "alpha {alpha}: {e1} {e2}");
    }
}

#[test]
fn conditional_term_gradient() {
    let mut r = rng::seeded(42);
    let q1 = tensor(&mut r, vec![BATCH, 5]);
    let t1 = tensor(&mut r, vec![BATCH, 5]);
    let q2 = tensor(&mut r, vec![BATCH, 5]);
    let t2 = tensor(&mut r, vec![BATCH, 5]);
    let (_, g1, g2) = conditional_with_grad(&q1, &t1, &q2, &t2).unwrap();
    let shape = q1.shape().to_vec();
    let t = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).unwrap();
    let e1 = max_input_error(q1.data(), g1.data(), |v| {
        conditional_loss(&t(v), &t1, &q2, &t2).unwrap()
    });
    let e2 = max_input_error(q2.data(), g2.data(), |v| {
        conditional_loss(&q1, &t1, &t(v), &t2).unwrap()
    });
    assert!(e1 < TOL && e2 < TOL, "{e1} {e2}");
}

fn tiny_contrast(dim: usize, seed: u64) -> ContrastNets {
    let net = ContrastNetConfig {
        transpose_channels: [3, 2],
        conv_channels: 3,
        head_hidden: 6,
        projection: 5,
        identity_init: false,
    };
    let mut nets = ContrastNets::new(dim, net, seed).unwrap();
    jitter(&mut nets.online_encoder, seed + 100);
    jitter(&mut nets.projector, seed + 101);
    jitter(&mut nets.predictor, seed + 102);
    // The target drifts away from the online copy so the pairing matters.
    jitter(&mut nets.target_encoder, seed + 103);
    jitter(&mut nets.target_projector, seed + 104);
    nets
}

/// Online parameters in the order used by `ContrastNets::accumulate`.
struct Online<'a>(&'a mut ContrastNets);

impl Module for Online<'_> {
    fn params(&self) -> Vec<&crossview_core::nn::Param> {
        let mut p = self.0.online_encoder.params();
        p.extend(self.0.projector.params());
        p.extend(self.0.predictor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut crossview_core::nn::Param> {
        let nets = &mut *self.0;
        let mut p = nets.online_encoder.params_mut();
        p.extend(nets.projector.params_mut());
        p.extend(nets.predictor.params_mut());
        p
    }
}

fn contrast_check(dim: usize, lambda: f64, pairing: PairingMode, seed: u64) -> f64 {
    let mut nets = tiny_contrast(dim, seed);
    let mut r = rng::seeded(seed + 2);
    let v = tensor(&mut r, vec![BATCH, dim]);
    let a = tensor(&mut r, vec![BATCH, dim]);
    let cfg = ContrastConfig {
        alpha: 9.0,
        lambda,
        pairing,
        ..ContrastConfig::default()
    };
    nets.zero_online_grads();
    nets.accumulate(&v, &a, &cfg).unwrap();
    let mut online = Online(&mut nets);
    let grads = online.flat_grads();
    max_param_error(&mut online, &grads, |_| true, |m| {
        m.0.loss(&v, &a, &cfg).unwrap().total
    })
}

#[test]
fn conditional_gradient_through_heads_and_encoder() {
    let err = contrast_check(4, 0.0, PairingMode::CrossView, 51);
    assert!(err < TOL, "conditional-only gradient error {err}");
    let err = contrast_check(4, 0.0, PairingMode::SameView, 52);
    assert!(err < TOL, "same-view gradient error {err}");
}

#[test]
fn mutual_info_gradient_through_encoder() {
    for (dim, seed) in [(4, 53), (16, 54)] {
        let err = contrast_check(dim, 1.0, PairingMode::CrossView, seed);
        assert!(err < TOL, "dim {dim}: total gradient error {err}");
    }
}

#[test]
fn target_branch_receives_no_gradient() {
    let mut nets = tiny_contrast(4, 55);
    let mut r = rng::seeded(56);
    let v = tensor(&mut r, vec![BATCH, 4]);
    let a = tensor(&mut r, vec![BATCH, 4]);
    nets.accumulate(&v, &a, &ContrastConfig::default()).unwrap();
    assert!(nets.target_encoder.flat_grads().iter().all(|g| *g == 0.0));
    assert!(nets.target_projector.flat_grads().iter().all(|g| *g == 0.0));
}

fn layer_check(mut layer: Layer, shape: Vec<usize>, mode: Mode, seed: u64) -> (f64, f64) {
    let mut r = rng::seeded(seed);
    let x = tensor(&mut r, shape);
    let (y, cache) = layer.apply(x.clone(), mode).unwrap();
    let w = normal(&mut r, y.len());
    let dot = |t: &Tensor| t.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let dy = Tensor::new(y.shape().to_vec(), w.clone()).unwrap();
    layer.zero_grad();
    let dx = layer.backward(&cache, dy);
    let grads = layer.flat_grads();
    let input_err = max_input_error(x.data(), dx.data(), |v| {
        let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        dot(&layer.apply(t, mode).unwrap().0)
    });
    let param_err = max_param_error(&mut layer, &grads, |_| true, |l| {
        dot(&l.apply(x.clone(), mode).unwrap().0)
    });
    (input_err, param_err)
}

#[test]
fn each_layer_matches_finite_differences() {
    let mut r = rng::seeded(61);
    let cases = vec![
        ("linear", Layer::Linear(Linear::new(5, 3, &mut r)), vec![4, 5]),
        (
            "conv",
            Layer::Conv(Conv::new(2, 3, [2, 3, 3], [0; 3], &mut r)),
            vec![3, 2, 3, 5, 4],
        ),
        (
            "conv transpose",
            Layer::ConvTranspose(ConvTranspose::new(3, 2, [2, 3, 3], [0; 3], &mut r)),
            vec![3, 3, 2, 3, 2],
        ),
        ("batch norm", Layer::BatchNorm(BatchNorm::new(3)), vec![4, 3, 1, 2, 2]),
        ("batch norm flat", Layer::BatchNorm(BatchNorm::new(3)), vec![6, 3]),
        ("leaky relu", Layer::LeakyRelu(0.2), vec![4, 7]),
        ("pool", Layer::Pool(AdaptiveAvgPool { out: [2, 3] }), vec![2, 3, 1, 5, 4]),
        ("reshape", Layer::Reshape(vec![6]), vec![2, 3, 1, 2, 1]),
    ];
    for (name, layer, shape) in cases {
        for mode in [Mode::Frozen, Mode::Eval] {
            let (ei, ep) = layer_check(layer.clone(), shape.clone(), mode, 62);
            assert!(ei < TOL && ep < TOL, "{name} {mode:?}: input {ei}, params {ep}");
        }
    }
}
