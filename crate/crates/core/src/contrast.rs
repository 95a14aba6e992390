//! Online/target contrastive refinement of the two autoencoder codes.
//!
//! The online branch maximizes the mutual information of a joint
//! distribution built from its two encoded views and predicts the target
//! branch's projection of the other view. The target branch never receives
//! gradients; it trails the online branch as an exponential moving average.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::epoch_batches;
use crate::error::{Error, Result};
use crate::history::{EpochMeans, LossHistory};
use crate::nn::kernels::gemm;
use crate::nn::paramfile::ParamFile;
use crate::nn::{
    joint_params_mut, Adam, AdamConfig, BatchNorm, Conv, ConvTranspose, Layer, Linear, Mode,
    Module, Param, Sequential, Trace,
};
use crate::rng;
use crate::tensor::Tensor;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Predict the target projection of the other view.
    CrossView,
    /// Predict the target projection of the same view.
    SameView,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::CrossView => "cross_view",
            PairingMode::SameView => "same_view",
        })
    }
}

/// Which per-epoch encoder snapshot to keep for feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotSelection {
    Final,
    /// 1-based epoch number.
    Epoch(usize),
    /// Highest downstream score, judged by the caller.
    Best,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastNetConfig {
    /// Channels of the two upsampling transposed convolutions.
    pub transpose_channels: [usize; 2],
    /// Channels of the three downsampling convolutions.
    pub conv_channels: usize,
    /// Hidden width of the projector and predictor.
    pub head_hidden: usize,
    pub projection: usize,
    /// Start the encoder as the identity map.
    pub identity_init: bool,
}

impl Default for ContrastNetConfig {
    fn default() -> Self {
        Self {
            transpose_channels: [16, 32],
            conv_channels: 32,
            head_hidden: 512,
            projection: 128,
            identity_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub net: ContrastNetConfig,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pairing: PairingMode,
    pub selection: SnapshotSelection,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            net: ContrastNetConfig::default(),
            alpha: 9.0,
            lambda: 100.0,
            tau: 0.99,
            adam: AdamConfig::with(3e-4, 1e-3),
            epochs: 200,
            batch_size: 256,
            seed: 0,
            pairing: PairingMode::CrossView,
            selection: SnapshotSelection::Final,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::arg(format!(
                "contrast needs alpha >= 0, lambda >= 0 and tau in [0, 1] (got {}, {}, {})",
                self.alpha, self.lambda, self.tau
            )));
        }
        if let SnapshotSelection::Epoch(e) = self.selection {
            if e == 0 || e > self.epochs {
                return Err(Error::arg(format!(
                    "snapshot epoch {e} outside 1..={}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a `batch x d` matrix.
fn softmax_rows(z: &Tensor) -> Vec<f64> {
    let d = z.row_len();
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Symmetric `d x d` joint distribution with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub dim: usize,
    /// Row-major `d x d`.
    pub p: Vec<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl JointDistribution {
    /// Builds the marginals of an explicit matrix.
    pub fn from_matrix(dim: usize, p: Vec<f64>) -> Result<Self> {
        if dim < 2 || p.len() != dim * dim {
            return Err(Error::arg(format!(
                "joint distribution needs a d x d matrix with d >= 2, got {} values for d = {dim}",
                p.len()
            )));
        }
        let row_marginal = p.chunks(dim).map(|r| r.iter().sum()).collect();
        let col_marginal = (0..dim)
            .map(|j| (0..dim).map(|i| p[i * dim + j]).sum())
            .collect();
        Ok(Self {
            dim,
            p,
            row_marginal,
            col_marginal,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.dim + j]
    }
}

struct JointParts {
    s1: Vec<f64>,
    s2: Vec<f64>,
    total: f64,
    joint: JointDistribution,
}

fn joint_parts(z1: &Tensor, z2: &Tensor) -> Result<JointParts> {
    if z1.shape() != z2.shape() || z1.shape().len() != 2 {
        return Err(Error::arg(format!(
            "joint_probability needs equal n x d batches, got {:?} and {:?}",
            z1.shape(),
            z2.shape()
        )));
    }
    let (n, d) = (z1.batch(), z1.row_len());
    if d < 2 {
        return Err(Error::arg(format!("feature dimension must be >= 2, got {d}")));
    }
    if n == 0 {
        return Err(Error::arg("joint_probability needs at least one row"));
    }
    let s1 = softmax_rows(z1);
    let s2 = softmax_rows(z2);
    let mut raw = vec![0.0; d * d];
    gemm(d, n, d, 1.0 / n as f64, &s1, true, &s2, false, 0.0, &mut raw);
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = 0.5 * (raw[i * d + j] + raw[j * d + i]);
        }
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(JointParts {
        s1,
        s2,
        total,
        joint: JointDistribution::from_matrix(d, p)?,
    })
}

/// Batch-averaged outer product of per-row softmaxes, symmetrized and
/// renormalized.
pub fn joint_probability(z1: &Tensor, z2: &Tensor) -> Result<JointDistribution> {
    Ok(joint_parts(z1, z2)?.joint)
}

/// `-sum P ln[P / (Pi^(alpha+1) Pj^(alpha+1))]`. With `alpha = 0` this is
/// the negative mutual information; larger `alpha` also rewards marginal
/// entropy.
pub fn mutual_info_loss(joint: &JointDistribution, alpha: f64) -> f64 {
    let d = joint.dim;
    let ln_pi: Vec<f64> = joint.row_marginal.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    let ln_pj: Vec<f64> = joint.col_marginal.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            let p = joint.get(i, j).max(PROB_FLOOR);
            acc += p * (p.ln() - (alpha + 1.0) * (ln_pi[i] + ln_pj[j]));
        }
    }
    -acc
}

fn softmax_backward(s: &[f64], ds: &mut [f64], d: usize) {
    for (srow, drow) in s.chunks(d).zip(ds.chunks_mut(d)) {
        let dot: f64 = srow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (g, sv) in drow.iter_mut().zip(srow) {
            *g = sv * (*g - dot);
        }
    }
}

/// Mutual-information loss of two feature batches and its gradients with
/// respect to both.
pub fn mutual_info_with_grad(z1: &Tensor, z2: &Tensor, alpha: f64) -> Result<(f64, Tensor, Tensor)> {
    let parts = joint_parts(z1, z2)?;
    let joint = &parts.joint;
    let (n, d) = (z1.batch(), joint.dim);
    let loss = mutual_info_loss(joint, alpha);

    let ln_pi: Vec<f64> = joint.row_marginal.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    let ln_pj: Vec<f64> = joint.col_marginal.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let p = joint.get(i, j);
            let own = if p > PROB_FLOOR { -(p.ln() + 1.0) } else { 0.0 };
            g[i * d + j] = own + (alpha + 1.0) * (ln_pi[i] + ln_pj[j] + 2.0);
        }
    }
    // through the renormalization
    let mean_g: f64 = g.iter().zip(&joint.p).map(|(a, b)| a * b).sum();
    g.iter_mut().for_each(|v| *v = (*v - mean_g) / parts.total);
    // through the symmetrization
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            h[i * d + j] = 0.5 * (g[i * d + j] + g[j * d + i]);
        }
    }
    let scale = 1.0 / n as f64;
    let mut ds1 = vec![0.0; n * d];
    let mut ds2 = vec![0.0; n * d];
    gemm(n, d, d, scale, &parts.s2, false, &h, true, 0.0, &mut ds1);
    gemm(n, d, d, scale, &parts.s1, false, &h, false, 0.0, &mut ds2);
    softmax_backward(&parts.s1, &mut ds1, d);
    softmax_backward(&parts.s2, &mut ds2, d);
    Ok((
        loss,
        Tensor::new(vec![n, d], ds1)?,
        Tensor::new(vec![n, d], ds2)?,
    ))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Sum over pairs of cosine similarities, per row, with gradients for the
/// first member of each pair.
fn cosine_rows(q: &Tensor, t: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if q.shape() != t.shape() {
        return Err(Error::arg(format!(
            "prediction {:?} and target {:?} differ in shape",
            q.shape(),
            t.shape()
        )));
    }
    let d = q.row_len();
    let mut cos = Vec::with_capacity(q.batch());
    let mut grad = Tensor::zeros(q.shape().to_vec());
    for ((qr, tr), gr) in q
        .rows()
        .zip(t.rows())
        .zip(grad.data_mut().chunks_mut(d.max(1)))
    {
        let (sq, st) = (sq_norm(qr), sq_norm(tr));
        if sq == 0.0 || st == 0.0 {
            return Err(Error::Domain("cosine of a zero-norm vector".into()));
        }
        let dot: f64 = qr.iter().zip(tr).map(|(a, b)| a * b).sum();
        let c = dot / (sq * st).sqrt();
        let (nq, nt) = (sq.sqrt(), st.sqrt());
        for ((g, a), b) in gr.iter_mut().zip(qr).zip(tr) {
            *g = (b / nt - c * a / nq) / nq;
        }
        cos.push(c);
    }
    Ok((cos, grad))
}

/// `2 - 2 (cos(q1, t1) + cos(q2, t2))`, averaged over batch rows.
pub fn conditional_loss(q1: &Tensor, t1: &Tensor, q2: &Tensor, t2: &Tensor) -> Result<f64> {
    Ok(conditional_with_grad(q1, t1, q2, t2)?.0)
}

/// Conditional loss and its gradients with respect to `q1` and `q2`.
pub fn conditional_with_grad(
    q1: &Tensor,
    t1: &Tensor,
    q2: &Tensor,
    t2: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    if q1.batch() != q2.batch() {
        return Err(Error::arg("both prediction batches must have the same rows"));
    }
    let (c1, mut g1) = cosine_rows(q1, t1)?;
    let (c2, mut g2) = cosine_rows(q2, t2)?;
    let n = c1.len().max(1) as f64;
    let loss = c1
        .iter()
        .zip(&c2)
        .map(|(a, b)| 2.0 - 2.0 * (a + b))
        .sum::<f64>()
        / n;
    for g in g1.data_mut().iter_mut().chain(g2.data_mut()) {
        *g *= -2.0 / n;
    }
    Ok((loss, g1, g2))
}

pub fn total_loss(mutual_info: f64, conditional: f64, lambda: f64) -> f64 {
    lambda * mutual_info + conditional
}

/// `target <- tau * target + (1 - tau) * online`, buffers included.
pub fn ema_update(target: &mut dyn Module, online: &dyn Module, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::arg(format!("tau must lie in [0, 1], got {tau}")));
    }
    let src = online.params();
    let dst = target.params_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::arg("online and target parameter shapes differ"));
    }
    for (t, o) in dst.into_iter().zip(src) {
        for (x, y) in t.value.iter_mut().zip(&o.value) {
            *x = tau * *x + (1.0 - tau) * y;
        }
    }
    Ok(())
}

/// Residual feature map `x + body(x)`; the body lifts the code to a small
/// image, upsamples, convolves back down and projects to the input width.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub dim: usize,
    pub body: Sequential,
}

impl FeatureEncoder {
    pub fn new(dim: usize, cfg: &ContrastNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::arg(format!("feature dimension must be >= 2, got {dim}")));
        }
        let [t0, t1] = cfg.transpose_channels;
        let c = cfg.conv_channels;
        if t0 == 0 || t1 == 0 || c == 0 {
            return Err(Error::arg("contrast encoder widths must be positive"));
        }
        let mut layers = Vec::new();
        let maps = if dim % 16 == 0 {
            dim / 16
        } else {
            layers.push(Layer::Linear(Linear::new(dim, 16, rng)));
            1
        };
        let k = [1, 3, 3];
        layers.push(Layer::Reshape(vec![maps, 1, 4, 4]));
        layers.push(Layer::ConvTranspose(ConvTranspose::new(maps, t0, k, [0; 3], rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::ConvTranspose(ConvTranspose::new(t0, t1, k, [0; 3], rng)));
        layers.push(Layer::Relu);
        let mut prev = t1;
        for _ in 0..3 {
            layers.push(Layer::Conv(Conv::new(prev, c, k, [0; 3], rng)));
            layers.push(Layer::Relu);
            prev = c;
        }
        layers.push(Layer::Reshape(vec![c * 4]));
        let mut out = Linear::new(c * 4, dim, rng);
        if cfg.identity_init {
            out = Linear::zeroed(c * 4, dim);
        }
        layers.push(Layer::Linear(out));
        Ok(Self {
            dim,
            body: Sequential::new(layers),
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.row_len() != self.dim {
            return Err(Error::arg(format!(
                "encoder expects n x {} codes, got {:?}",
                self.dim,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        self.check(x)?;
        let (mut y, trace) = self.body.forward(x.clone(), mode)?;
        add_assign(&mut y, x);
        Ok((y, trace))
    }

    pub fn backward(&mut self, trace: &Trace, dy: Tensor) -> Tensor {
        let mut dx = self.body.backward(trace, dy.clone());
        add_assign(&mut dx, &dy);
        dx
    }

    pub fn infer(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check(x)?;
        let mut y = self.body.infer(x.clone(), mode)?;
        add_assign(&mut y, x);
        Ok(y)
    }
}

impl Module for FeatureEncoder {
    fn params(&self) -> Vec<&Param> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.body.params_mut()
    }
}

fn add_assign(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn head(inputs: usize, cfg: &ContrastNetConfig, rng: &mut impl Rng) -> Sequential {
    Sequential::new(vec![
        Layer::Linear(Linear::new(inputs, cfg.head_hidden, rng)),
        Layer::BatchNorm(BatchNorm::new(cfg.head_hidden)),
        Layer::Relu,
        Layer::Linear(Linear::new(cfg.head_hidden, cfg.projection, rng)),
    ])
}

#[derive(Debug, Clone)]
pub struct ContrastNets {
    pub config: ContrastNetConfig,
    pub online_encoder: FeatureEncoder,
    pub projector: Sequential,
    pub predictor: Sequential,
    pub target_encoder: FeatureEncoder,
    pub target_projector: Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mutual_info: f64,
    pub conditional: f64,
    pub total: f64,
}

impl ContrastNets {
    /// Fresh online networks; the target starts as an exact copy.
    pub fn new(dim: usize, config: ContrastNetConfig, seed: u64) -> Result<Self> {
        if config.head_hidden == 0 || config.projection == 0 {
            return Err(Error::arg("projector widths must be positive"));
        }
        let mut r = rng::seeded(seed);
        let online_encoder = FeatureEncoder::new(dim, &config, &mut r)?;
        let projector = head(dim, &config, &mut r);
        let predictor = head(config.projection, &config, &mut r);
        Ok(Self {
            target_encoder: online_encoder.clone(),
            target_projector: projector.clone(),
            config,
            online_encoder,
            projector,
            predictor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.online_encoder.dim
    }

    pub fn zero_online_grads(&mut self) {
        self.online_encoder.zero_grad();
        self.projector.zero_grad();
        self.predictor.zero_grad();
    }

    /// Forward/backward of the weighted loss for one batch of aligned codes.
    /// Only online gradients are accumulated.
    pub fn accumulate(&mut self, vae: &Tensor, aae: &Tensor, cfg: &ContrastConfig) -> Result<StepLosses> {
        let (f1, enc1) = self.online_encoder.forward(vae, Mode::Train)?;
        let (f2, enc2) = self.online_encoder.forward(aae, Mode::Train)?;
        let (lm, dm1, dm2) = mutual_info_with_grad(&f1, &f2, cfg.alpha)?;
        let (p1, proj1) = self.projector.forward(f1, Mode::Train)?;
        let (q1, pred1) = self.predictor.forward(p1, Mode::Train)?;
        let (p2, proj2) = self.projector.forward(f2, Mode::Train)?;
        let (q2, pred2) = self.predictor.forward(p2, Mode::Train)?;

        let target = |x: &Tensor| -> Result<Tensor> {
            let f = self.target_encoder.infer(x, Mode::Frozen)?;
            self.target_projector.infer(f, Mode::Frozen)
        };
        let (t_vae, t_aae) = (target(vae)?, target(aae)?);
        let (t1, t2) = match cfg.pairing {
            PairingMode::CrossView => (t_aae, t_vae),
            PairingMode::SameView => (t_vae, t_aae),
        };
        let (lc, dq1, dq2) = conditional_with_grad(&q1, &t1, &q2, &t2)?;

        for (dq, pred, proj, dm, enc) in [(dq1, pred1, proj1, dm1, enc1), (dq2, pred2, proj2, dm2, enc2)] {
            let dp = self.predictor.backward(&pred, dq);
            let mut df = self.projector.backward(&proj, dp);
            for (a, b) in df.data_mut().iter_mut().zip(dm.data()) {
                *a += cfg.lambda * b;
            }
            self.online_encoder.backward(&enc, df);
        }
        Ok(StepLosses {
            mutual_info: lm,
            conditional: lc,
            total: total_loss(lm, lc, cfg.lambda),
        })
    }

    /// Loss of one batch without gradients or running-statistic updates.
    pub fn loss(&self, vae: &Tensor, aae: &Tensor, cfg: &ContrastConfig) -> Result<StepLosses> {
        let f1 = self.online_encoder.infer(vae, Mode::Frozen)?;
        let f2 = self.online_encoder.infer(aae, Mode::Frozen)?;
        let lm = mutual_info_loss(&joint_probability(&f1, &f2)?, cfg.alpha);
        let q1 = self.predictor.infer(self.projector.infer(f1, Mode::Frozen)?, Mode::Frozen)?;
        let q2 = self.predictor.infer(self.projector.infer(f2, Mode::Frozen)?, Mode::Frozen)?;
        let target = |x: &Tensor| -> Result<Tensor> {
            let f = self.target_encoder.infer(x, Mode::Frozen)?;
            self.target_projector.infer(f, Mode::Frozen)
        };
        let (t_vae, t_aae) = (target(vae)?, target(aae)?);
        let (t1, t2) = match cfg.pairing {
            PairingMode::CrossView => (t_aae, t_vae),
            PairingMode::SameView => (t_vae, t_aae),
        };
        let lc = conditional_loss(&q1, &t1, &q2, &t2)?;
        Ok(StepLosses {
            mutual_info: lm,
            conditional: lc,
            total: total_loss(lm, lc, cfg.lambda),
        })
    }

    /// One full update: gradients, an optimizer step on the online branch,
    /// then the moving-average update of the target branch.
    pub fn train_step(
        &mut self,
        vae: &Tensor,
        aae: &Tensor,
        cfg: &ContrastConfig,
        adam: &mut Adam,
    ) -> Result<StepLosses> {
        self.zero_online_grads();
        let losses = self.accumulate(vae, aae, cfg)?;
        adam.step(&mut joint_params_mut(vec![
            &mut self.online_encoder,
            &mut self.projector,
            &mut self.predictor,
        ]));
        ema_update(&mut self.target_encoder, &self.online_encoder, cfg.tau)?;
        ema_update(&mut self.target_projector, &self.projector, cfg.tau)?;
        Ok(losses)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut pf = ParamFile::new(json!({
            "kind": "contrast",
            "feature_dim": self.feature_dim(),
            "net": self.config,
            "seed": seed,
        }));
        pf.push("online_encoder", self.online_encoder.flat_values());
        pf.push("online_projector", self.projector.flat_values());
        pf.push("predictor", self.predictor.flat_values());
        pf.push("target_encoder", self.target_encoder.flat_values());
        pf.push("target_projector", self.target_projector.flat_values());
        pf.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pf = ParamFile::read(path)?;
        let h = &pf.header;
        let bad = |what: &str| Error::format(path, format!("missing or invalid {what}"));
        if h["kind"] != "contrast" {
            return Err(Error::format(path, "not a contrast parameter file"));
        }
        let config: ContrastNetConfig =
            serde_json::from_value(h["net"].clone()).map_err(|_| bad("net"))?;
        let dim = h["feature_dim"].as_u64().ok_or_else(|| bad("feature_dim"))? as usize;
        let mut nets = ContrastNets::new(dim, config, 0)?;
        let load = |name: &str, m: &mut dyn Module| -> Result<()> {
            let block = pf.block(name).ok_or_else(|| bad(name))?;
            m.load_flat(block).map_err(|_| bad(name))
        };
        load("online_encoder", &mut nets.online_encoder)?;
        load("online_projector", &mut nets.projector)?;
        load("predictor", &mut nets.predictor)?;
        load("target_encoder", &mut nets.target_encoder)?;
        load("target_projector", &mut nets.target_projector)?;
        Ok(nets)
    }
}

#[derive(Debug, Clone)]
pub struct ContrastOutcome {
    /// Columns: L_m, L_c, total.
    pub history: LossHistory,
    /// Online encoder values after each epoch; empty unless the selection
    /// needs them.
    pub snapshots: Vec<Vec<f64>>,
}

/// Trains on row-aligned code matrices (row `i` of both belongs to patch `i`).
/// Batches with fewer than two rows are skipped.
pub fn train_contrast(
    nets: &mut ContrastNets,
    vae_codes: &Tensor,
    aae_codes: &Tensor,
    config: &ContrastConfig,
) -> Result<ContrastOutcome> {
    config.validate()?;
    if vae_codes.shape() != aae_codes.shape()
        || vae_codes.shape().len() != 2
        || vae_codes.row_len() != nets.feature_dim()
    {
        return Err(Error::arg(format!(
            "code sets must both be n x {}, got {:?} and {:?}",
            nets.feature_dim(),
            vae_codes.shape(),
            aae_codes.shape()
        )));
    }
    if !vae_codes.is_finite() || !aae_codes.is_finite() {
        return Err(Error::Data("codes contain non-finite values".into()));
    }
    let keep = config.selection != SnapshotSelection::Final;
    let mut history = LossHistory::new(&["L_m", "L_c", "total"]);
    let mut snapshots = Vec::new();
    let mut shuffle = rng::seeded(rng::substream(config.seed, "contrast/shuffle"));
    let mut adam = Adam::new(config.adam);
    for epoch in 0..config.epochs {
        let mut means = EpochMeans::new(3);
        for (b, idx) in epoch_batches(vae_codes.batch(), config.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 {
                continue;
            }
            let v = vae_codes.select_rows(&idx);
            let a = aae_codes.select_rows(&idx);
            let l = nets.train_step(&v, &a, config, &mut adam)?;
            if !l.total.is_finite() {
                return Err(Error::Numeric {
                    stage: "contrast",
                    epoch,
                    batch: b,
                    detail: format!("L_m {} L_c {}", l.mutual_info, l.conditional),
                });
            }
            means.add(&[l.mutual_info, l.conditional, l.total]);
        }
        history.push(means.finish());
        if keep {
            snapshots.push(nets.online_encoder.flat_values());
        }
    }
    Ok(ContrastOutcome { history, snapshots })
}

/// Applies the online encoder to every row.
pub fn extract_features(encoder: &FeatureEncoder, codes: &Tensor) -> Result<Tensor> {
    if codes.shape().len() != 2 || codes.row_len() != encoder.dim {
        return Err(Error::arg(format!(
            "expected n x {} codes, got {:?}",
            encoder.dim,
            codes.shape()
        )));
    }
    let n = codes.batch();
    let mut out = Vec::with_capacity(n * encoder.dim);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(256) {
        let rows = codes.select_rows(idx);
        out.extend(encoder.infer(&rows, Mode::Eval)?.into_data());
    }
    Tensor::new(vec![n, encoder.dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, d: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, d], v).unwrap()
    }

    #[test]
    fn closed_form_losses() {
        let diag = JointDistribution::from_matrix(2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((mutual_info_loss(&diag, 0.0) + ln2).abs() < 1e-9);
        assert!((mutual_info_loss(&diag, 9.0) + 19.0 * ln2).abs() < 1e-9);
        let uniform = JointDistribution::from_matrix(2, vec![0.25; 4]).unwrap();
        assert!(mutual_info_loss(&uniform, 0.0).abs() < 1e-9);
    }

    #[test]
    fn two_by_two_joint() {
        let z = mat(1, 2, vec![10.0, 0.0]);
        let j = joint_probability(&z, &z).unwrap();
        let p = 10f64.exp() / (10f64.exp() + 1.0);
        let expect = [p * p, p * (1.0 - p), p * (1.0 - p), (1.0 - p) * (1.0 - p)];
        for (a, b) in j.p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((j.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_logits_give_uniform_joint() {
        let z = Tensor::zeros(vec![5, 4]);
        let j = joint_probability(&z, &z).unwrap();
        assert!(j.p.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(joint_probability(&Tensor::zeros(vec![2, 1]), &Tensor::zeros(vec![2, 1])).is_err());
    }

    #[test]
    fn conditional_examples() {
        let q = mat(1, 2, vec![1.0, 2.0]);
        let perp = mat(1, 2, vec![-2.0, 1.0]);
        let neg = mat(1, 2, vec![-1.0, -2.0]);
        assert_eq!(conditional_loss(&q, &q, &q, &q).unwrap(), -2.0);
        assert_eq!(conditional_loss(&q, &perp, &q, &perp).unwrap(), 2.0);
        assert_eq!(conditional_loss(&q, &neg, &q, &neg).unwrap(), 6.0);
        let zero = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            conditional_loss(&zero, &q, &q, &q),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(-0.5, 1.25, 0.0), 1.25);
        assert!((total_loss(-0.693147, -2.0, 100.0) + 71.3147).abs() < 1e-9);
    }

    #[test]
    fn ema_examples() {
        let mut t = Linear::zeroed(1, 1);
        t.weight.value[0] = 1.0;
        let o = Linear::zeroed(1, 1);
        ema_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t.weight.value[0], 1.0);
        for _ in 0..100 {
            ema_update(&mut t, &o, 0.99).unwrap();
        }
        assert!((t.weight.value[0] - 0.99f64.powi(100)).abs() < 1e-12);
        assert!((t.weight.value[0] - 0.3660).abs() < 1e-4);
        let mut o2 = Linear::zeroed(1, 1);
        o2.weight.value[0] = 4.0;
        ema_update(&mut t, &o2, 0.0).unwrap();
        assert_eq!(t.weight.value[0], 4.0);
        assert!(ema_update(&mut t, &Linear::zeroed(2, 1), 0.5).is_err());
        assert!(ema_update(&mut t, &o, 1.5).is_err());
    }

    #[test]
    fn identity_encoder_and_empty_input() {
        let cfg = ContrastNetConfig {
            identity_init: true,
            transpose_channels: [2, 3],
            conv_channels: 3,
            ..Default::default()
        };
        for dim in [32, 6] {
            let enc = FeatureEncoder::new(dim, &cfg, &mut rng::seeded(1)).unwrap();
            let x = mat(3, dim, (0..3 * dim).map(|i| (i as f64).sin()).collect());
            let y = extract_features(&enc, &x).unwrap();
            assert_eq!(y, x);
            let empty = extract_features(&enc, &Tensor::zeros(vec![0, dim])).unwrap();
            assert_eq!(empty.shape(), &[0, dim]);
            assert!(extract_features(&enc, &Tensor::zeros(vec![2, dim + 1])).is_err());
        }
    }

    #[test]
    fn nets_round_trip() {
        let cfg = ContrastNetConfig {
            transpose_channels: [2, 2],
            conv_channels: 2,
            head_hidden: 5,
            projection: 3,
            identity_init: false,
        };
        let nets = ContrastNets::new(16, cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        nets.save(&path, 2).unwrap();
        let back = ContrastNets::load(&path).unwrap();
        assert_eq!(back.online_encoder.flat_values(), nets.online_encoder.flat_values());
        assert_eq!(back.target_projector.flat_values(), nets.target_projector.flat_values());
    }

    #[test]
    fn config_validation() {
        let mut c = ContrastConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 1.2;
        assert!(c.validate().is_err());
        c.tau = 0.5;
        c.selection = SnapshotSelection::Epoch(0);
        assert!(c.validate().is_err());
    }
}
