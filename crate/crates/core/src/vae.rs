//! Variational autoencoder that predicts one channel view from the other.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{epoch_batches, mse_with_grad, view_batch, BackboneConfig};
use crate::channelsplit::ChannelSplit;
use crate::datacube::PatchSet;
use crate::error::{Error, Result};
use crate::history::{EpochMeans, LossHistory};
use crate::nn::paramfile::ParamFile;
use crate::nn::{Adam, AdamConfig, Linear, Mode, Module, Param, Sequential};
use crate::rng;
use crate::tensor::Tensor;

/// Bounds applied to the log-variance head before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Reconstruct the input view instead of predicting the other one.
    pub self_reconstruction: bool,
    /// Draw a fresh random split every epoch (random strategy only).
    pub redraw_split: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            epochs: 40,
            batch_size: 256,
            adam: AdamConfig::with(1e-3, 5e-4),
            seed: 0,
            self_reconstruction: false,
            redraw_split: true,
        }
    }
}

/// Mean and log-variance rows, one per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCode {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianCode {
    pub fn sigma(&self) -> Tensor {
        let mut s = self.logvar.clone();
        s.data_mut().iter_mut().for_each(|v| *v = (0.5 * *v).exp());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLosses {
    pub mse: f64,
    pub kl: f64,
}

impl VaeLosses {
    pub fn total(&self) -> f64 {
        self.mse + self.kl
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub backbone: BackboneConfig,
    pub patch_size: usize,
    pub input_depth: usize,
    pub output_depth: usize,
    pub encoder: Sequential,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub decoder: Sequential,
}

/// `z = mu + sigma * noise`, elementwise.
pub fn reparameterize(mu: &[f64], sigma: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != noise.len() {
        return Err(Error::arg(format!(
            "reparameterize got lengths {}, {}, {}",
            mu.len(),
            sigma.len(),
            noise.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// KL divergence from `N(mu, sigma^2)` to the standard normal, summed over
/// latent dimensions and averaged over batch rows.
pub fn kl_loss(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::arg(format!(
            "kl_loss shapes differ: {:?} vs {:?}",
            mu.shape(),
            sigma.shape()
        )));
    }
    if let Some(s) = sigma.data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(m, s)| {
            let var = s * s;
            0.5 * (m * m + var - var.ln() - 1.0)
        })
        .sum();
    Ok(total / mu.batch().max(1) as f64)
}

/// Same quantity parameterized by log-variance, with its gradients with
/// respect to `mu` and `logvar`.
pub fn kl_from_logvar(mu: &[f64], logvar: &[f64], rows: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let b = rows.max(1) as f64;
    let mut loss = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (m, lv) in mu.iter().zip(logvar) {
        let e = lv.exp();
        loss += 0.5 * (m * m + e - lv - 1.0);
        dmu.push(m / b);
        dlv.push(0.5 * (e - 1.0) / b);
    }
    (loss / b, dmu, dlv)
}

/// Mean over all elements of the squared difference.
pub fn mse_loss(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::arg(format!(
            "mse_loss shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

fn clamp_logvar(raw: &Tensor) -> (Tensor, Vec<bool>) {
    let mut lv = raw.clone();
    let mut inside = Vec::with_capacity(raw.len());
    for v in lv.data_mut() {
        inside.push((-LOGVAR_CLAMP..=LOGVAR_CLAMP).contains(v));
        *v = v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
    }
    (lv, inside)
}

impl Vae {
    pub fn new(
        backbone: BackboneConfig,
        patch_size: usize,
        input_depth: usize,
        output_depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let encoder = backbone.encoder(input_depth, patch_size, &mut r)?;
        let mu_head = Linear::new(backbone.hidden, backbone.latent, &mut r);
        let logvar_head = Linear::new(backbone.hidden, backbone.latent, &mut r);
        let decoder = backbone.decoder(output_depth, patch_size, &mut r)?;
        Ok(Self {
            backbone,
            patch_size,
            input_depth,
            output_depth,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone.latent
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.patch_size;
        if x.shape().len() != 5 || x.shape()[1..] != [1, self.input_depth, s, s] {
            return Err(Error::arg(format!(
                "vae expects (batch, 1, {}, {s}, {s}) input, got {:?}",
                self.input_depth,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Deterministic encoding with running batch-norm statistics.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianCode> {
        self.encode_with(x, Mode::Eval)
    }

    pub fn encode_with(&self, x: &Tensor, mode: Mode) -> Result<GaussianCode> {
        self.check_input(x)?;
        let h = self.encoder.infer(x.clone(), mode)?;
        let mu = self.mu_head.forward(&h)?;
        let (logvar, _) = clamp_logvar(&self.logvar_head.forward(&h)?);
        Ok(GaussianCode { mu, logvar })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.infer(z.clone(), Mode::Eval)
    }

    /// One forward/backward pass with the given noise. Gradients are
    /// accumulated into the parameters; `target` is the flattened view the
    /// decoder should reproduce.
    pub fn step(&mut self, x: &Tensor, target: &[f64], noise: &[f64], mode: Mode) -> Result<VaeLosses> {
        self.check_input(x)?;
        let b = x.batch();
        let s = self.patch_size;
        if target.len() != b * self.output_depth * s * s {
            return Err(Error::arg(format!(
                "target holds {} values, expected {b} x {} x {s} x {s}",
                target.len(),
                self.output_depth
            )));
        }
        if noise.len() != b * self.latent_dim() {
            return Err(Error::arg("noise does not match batch x latent"));
        }
        let (h, enc_trace) = self.encoder.forward(x.clone(), mode)?;
        let mu = self.mu_head.forward(&h)?;
        let (logvar, inside) = clamp_logvar(&self.logvar_head.forward(&h)?);
        let sigma: Vec<f64> = logvar.data().iter().map(|v| (0.5 * v).exp()).collect();
        let z = reparameterize(mu.data(), &sigma, noise)?;
        let z = Tensor::new(mu.shape().to_vec(), z)?;
        let (y, dec_trace) = self.decoder.forward(z, mode)?;
        let (mse, dy) = mse_with_grad(&y, target);
        let (kl, dmu_kl, dlv_kl) = kl_from_logvar(mu.data(), logvar.data(), b);

        let dz = self.decoder.backward(&dec_trace, dy);
        let mut dmu = dz.clone();
        let mut dlv = dz;
        for i in 0..dmu.len() {
            dmu.data_mut()[i] += dmu_kl[i];
            let d = dlv.data()[i] * noise[i] * 0.5 * sigma[i] + dlv_kl[i];
            dlv.data_mut()[i] = if inside[i] { d } else { 0.0 };
        }
        let mut dh = self.mu_head.backward(&h, &dmu);
        let dh_lv = self.logvar_head.backward(&h, &dlv);
        for (a, b) in dh.data_mut().iter_mut().zip(dh_lv.data()) {
            *a += b;
        }
        self.encoder.backward(&enc_trace, dh);
        Ok(VaeLosses { mse, kl })
    }

    /// Loss of one pass without touching gradients or running statistics.
    pub fn evaluate(&self, x: &Tensor, target: &[f64], noise: &[f64], mode: Mode) -> Result<VaeLosses> {
        let code = self.encode_with(x, mode)?;
        let sigma = code.sigma();
        let z = reparameterize(code.mu.data(), sigma.data(), noise)?;
        let z = Tensor::new(code.mu.shape().to_vec(), z)?;
        let y = self.decoder.infer(z, mode)?;
        let (mse, _) = mse_with_grad(&y, target);
        let (kl, _, _) = kl_from_logvar(code.mu.data(), code.logvar.data(), x.batch());
        Ok(VaeLosses { mse, kl })
    }

    fn encoder_values(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_values();
        v.extend(self.mu_head.flat_values());
        v.extend(self.logvar_head.flat_values());
        v
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut pf = ParamFile::new(json!({
            "kind": "vae",
            "backbone": self.backbone,
            "patch_size": self.patch_size,
            "input_depth": self.input_depth,
            "output_depth": self.output_depth,
            "seed": seed,
        }));
        pf.push("encoder", self.encoder_values());
        pf.push("decoder", self.decoder.flat_values());
        pf.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pf = ParamFile::read(path)?;
        let h = &pf.header;
        if h["kind"] != "vae" {
            return Err(Error::format(path, "not a vae parameter file"));
        }
        let backbone: BackboneConfig = serde_json::from_value(h["backbone"].clone())
            .map_err(|e| Error::format(path, format!("bad backbone: {e}")))?;
        let dim = |k: &str| {
            h[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::format(path, format!("missing {k}")))
        };
        let mut vae = Vae::new(
            backbone,
            dim("patch_size")?,
            dim("input_depth")?,
            dim("output_depth")?,
            0,
        )?;
        let enc = pf
            .block("encoder")
            .ok_or_else(|| Error::format(path, "missing encoder block"))?;
        let dec = pf
            .block("decoder")
            .ok_or_else(|| Error::format(path, "missing decoder block"))?;
        let (n_body, n_mu) = (vae.encoder.num_values(), vae.mu_head.num_values());
        if enc.len() != n_body + 2 * n_mu {
            return Err(Error::format(path, "encoder block has the wrong length"));
        }
        vae.encoder.load_flat(&enc[..n_body])?;
        vae.mu_head.load_flat(&enc[n_body..n_body + n_mu])?;
        vae.logvar_head.load_flat(&enc[n_body + n_mu..])?;
        vae.decoder
            .load_flat(dec)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(vae)
    }
}

impl Module for Vae {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.mu_head.params());
        p.extend(self.logvar_head.params());
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.mu_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Input and target channel lists for an epoch's split.
pub(crate) fn views(split: &ChannelSplit, self_reconstruction: bool, forward: bool) -> (Vec<usize>, Vec<usize>) {
    let (a, b) = if forward {
        (&split.indices1, &split.indices2)
    } else {
        (&split.indices2, &split.indices1)
    };
    if self_reconstruction {
        (a.clone(), a.clone())
    } else {
        (a.clone(), b.clone())
    }
}

pub(crate) fn standard_normal(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

/// Trains on every patch: encode view 1, predict view 2 (or view 1 again in
/// self-reconstruction mode). History columns: mse, kl, total.
pub fn train_vae(
    vae: &mut Vae,
    patches: &PatchSet,
    split: &ChannelSplit,
    config: &VaeConfig,
) -> Result<LossHistory> {
    let (inp, tgt) = views(split, config.self_reconstruction, true);
    if split.total_channels != patches.channels
        || vae.input_depth != inp.len()
        || vae.output_depth != tgt.len()
        || vae.patch_size != patches.patch_size
    {
        return Err(Error::arg(
            "vae geometry does not match the patches and channel split",
        ));
    }
    let mut history = LossHistory::new(&["mse", "kl", "total"]);
    let mut shuffle = rng::seeded(rng::substream(config.seed, "vae/shuffle"));
    let mut noise_rng = rng::seeded(rng::substream(config.seed, "vae/noise"));
    let mut adam = Adam::new(config.adam);
    for epoch in 0..config.epochs {
        let current = split.for_epoch(epoch, config.redraw_split)?;
        let (inp, tgt) = views(&current, config.self_reconstruction, true);
        let mut means = EpochMeans::new(3);
        for (b, idx) in epoch_batches(patches.len(), config.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let x = view_batch(patches, &idx, &inp);
            let t = view_batch(patches, &idx, &tgt);
            let noise = standard_normal(&mut noise_rng, idx.len() * vae.latent_dim());
            vae.zero_grad();
            let losses = vae.step(&x, t.data(), &noise, Mode::Train)?;
            if !losses.total().is_finite() {
                return Err(Error::Numeric {
                    stage: "vae",
                    epoch,
                    batch: b,
                    detail: format!("mse {} kl {}", losses.mse, losses.kl),
                });
            }
            adam.step(&mut vae.params_mut());
            means.add(&[losses.mse, losses.kl, losses.total()]);
        }
        history.push(means.finish());
    }
    Ok(history)
}

/// Mean codes of every patch's view-1 channels, in patch order.
pub fn encode_patches(vae: &Vae, patches: &PatchSet, channels: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(patches.len() * vae.latent_dim());
    let all: Vec<usize> = (0..patches.len()).collect();
    for idx in all.chunks(256) {
        let x = view_batch(patches, idx, channels);
        rows.extend(vae.encode(&x)?.mu.into_data());
    }
    Tensor::new(vec![patches.len(), vae.latent_dim()], rows)
}
