//! Adversarial autoencoder: predicts view 1 from view 2 while a Wasserstein
//! critic pulls the codes toward a standard normal.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{epoch_batches, mse_with_grad, view_batch, BackboneConfig};
use crate::channelsplit::ChannelSplit;
use crate::datacube::PatchSet;
use crate::error::{Error, Result};
use crate::history::{EpochMeans, LossHistory};
use crate::nn::paramfile::ParamFile;
use crate::nn::{Adam, AdamConfig, Layer, Linear, Mode, Module, Param, Sequential, Sgd};
use crate::rng;
use crate::tensor::Tensor;
use crate::vae::{standard_normal, views};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AaeConfig {
    pub backbone: BackboneConfig,
    /// Hidden widths of the critic.
    pub critic_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub generator_lr: f64,
    pub critic_lr: f64,
    pub clip: f64,
    pub seed: u64,
    pub self_reconstruction: bool,
    pub redraw_split: bool,
}

impl Default for AaeConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            critic_hidden: vec![64, 32],
            epochs: 30,
            batch_size: 256,
            adam: AdamConfig::with(1e-3, 5e-4),
            generator_lr: 1e-4,
            critic_lr: 5e-5,
            clip: 0.01,
            seed: 0,
            self_reconstruction: false,
            redraw_split: true,
        }
    }
}

/// Critic outputs on prior samples and on codes, reduced to objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WganBatchStats {
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    /// Minimized by the critic: `mean(fake) - mean(real)`.
    pub d_loss: f64,
    /// Minimized by the encoder: `-mean(fake)`.
    pub g_loss: f64,
}

pub fn wgan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<WganBatchStats> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::arg("critic outputs must be nonempty"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, f) = (mean(d_real), mean(d_fake));
    Ok(WganBatchStats {
        d_real_mean: r,
        d_fake_mean: f,
        d_loss: f - r,
        g_loss: -f,
    })
}

#[derive(Debug, Clone)]
pub struct Aae {
    pub backbone: BackboneConfig,
    pub patch_size: usize,
    pub input_depth: usize,
    pub output_depth: usize,
    pub critic_hidden: Vec<usize>,
    pub encoder: Sequential,
    pub head: Linear,
    pub decoder: Sequential,
    pub critic: Sequential,
}

fn critic(latent: usize, hidden: &[usize], rng: &mut rng::Rng) -> Sequential {
    let mut layers = Vec::new();
    let mut prev = latent;
    for &h in hidden {
        layers.push(Layer::Linear(Linear::new(prev, h, rng)));
        layers.push(Layer::LeakyRelu(0.2));
        prev = h;
    }
    layers.push(Layer::Linear(Linear::new(prev, 1, rng)));
    Sequential::new(layers)
}

/// Clamps every critic parameter to `[-bound, bound]`.
pub fn clip_discriminator(critic: &mut Sequential, bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::arg(format!("clip bound must be positive, got {bound}")));
    }
    for p in critic.params_mut() {
        p.value.iter_mut().for_each(|w| *w = w.clamp(-bound, bound));
    }
    Ok(())
}

/// Encoder with its code head, as one parameter group.
struct Generator<'a> {
    encoder: &'a mut Sequential,
    head: &'a mut Linear,
}

impl Module for Generator<'_> {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

impl Aae {
    pub fn new(
        backbone: BackboneConfig,
        critic_hidden: &[usize],
        patch_size: usize,
        input_depth: usize,
        output_depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let encoder = backbone.encoder(input_depth, patch_size, &mut r)?;
        let head = Linear::new(backbone.hidden, backbone.latent, &mut r);
        let decoder = backbone.decoder(output_depth, patch_size, &mut r)?;
        let critic = critic(backbone.latent, critic_hidden, &mut r);
        Ok(Self {
            backbone,
            patch_size,
            input_depth,
            output_depth,
            critic_hidden: critic_hidden.to_vec(),
            encoder,
            head,
            decoder,
            critic,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone.latent
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.patch_size;
        if x.shape().len() != 5 || x.shape()[1..] != [1, self.input_depth, s, s] {
            return Err(Error::arg(format!(
                "aae expects (batch, 1, {}, {s}, {s}) input, got {:?}",
                self.input_depth,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Deterministic code with running batch-norm statistics.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_with(x, Mode::Eval)
    }

    pub fn encode_with(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let h = self.encoder.infer(x.clone(), mode)?;
        self.head.forward(&h)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.infer(z.clone(), Mode::Eval)
    }

    /// Reconstruction pass; accumulates encoder, head and decoder gradients.
    pub fn reconstruction_step(&mut self, x: &Tensor, target: &[f64], mode: Mode) -> Result<f64> {
        self.check_input(x)?;
        if target.len() != x.batch() * self.output_depth * self.patch_size * self.patch_size {
            return Err(Error::arg("target does not match the decoder output"));
        }
        let (h, enc_trace) = self.encoder.forward(x.clone(), mode)?;
        let z = self.head.forward(&h)?;
        let (y, dec_trace) = self.decoder.forward(z, mode)?;
        let (mse, dy) = mse_with_grad(&y, target);
        let dz = self.decoder.backward(&dec_trace, dy);
        let dh = self.head.backward(&h, &dz);
        self.encoder.backward(&enc_trace, dh);
        Ok(mse)
    }

    /// Reconstruction loss without touching gradients or running statistics.
    pub fn reconstruction_loss(&self, x: &Tensor, target: &[f64], mode: Mode) -> Result<f64> {
        let z = self.encode_with(x, mode)?;
        let y = self.decoder.infer(z, mode)?;
        Ok(mse_with_grad(&y, target).0)
    }

    /// Critic pass on prior samples and detached codes; accumulates critic
    /// gradients of `mean(fake) - mean(real)`.
    pub fn critic_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<WganBatchStats> {
        let (d_real, real_trace) = self.critic.forward(real.clone(), Mode::Train)?;
        let (d_fake, fake_trace) = self.critic.forward(fake.clone(), Mode::Train)?;
        let stats = wgan_losses(d_real.data(), d_fake.data())?;
        let fill = |n: usize, v: f64| Tensor::new(vec![n, 1], vec![v; n]).expect("column");
        let nr = d_real.batch();
        let nf = d_fake.batch();
        self.critic.backward(&real_trace, fill(nr, -1.0 / nr as f64));
        self.critic.backward(&fake_trace, fill(nf, 1.0 / nf as f64));
        Ok(stats)
    }

    /// Generator pass: gradient of `-mean(D(encode(x)))` into the encoder and
    /// head. Critic gradients are discarded.
    pub fn generator_step(&mut self, x: &Tensor, mode: Mode) -> Result<f64> {
        self.check_input(x)?;
        let (h, enc_trace) = self.encoder.forward(x.clone(), mode)?;
        let z = self.head.forward(&h)?;
        let (d, trace) = self.critic.forward(z, Mode::Train)?;
        let n = d.batch();
        let g_loss = -d.data().iter().sum::<f64>() / n as f64;
        let dd = Tensor::new(vec![n, 1], vec![-1.0 / n as f64; n])?;
        let dz = self.critic.backward(&trace, dd);
        self.critic.zero_grad();
        let dh = self.head.backward(&h, &dz);
        self.encoder.backward(&enc_trace, dh);
        Ok(g_loss)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut pf = ParamFile::new(json!({
            "kind": "aae",
            "backbone": self.backbone,
            "critic_hidden": self.critic_hidden,
            "patch_size": self.patch_size,
            "input_depth": self.input_depth,
            "output_depth": self.output_depth,
            "seed": seed,
        }));
        let mut enc = self.encoder.flat_values();
        enc.extend(self.head.flat_values());
        pf.push("encoder", enc);
        pf.push("decoder", self.decoder.flat_values());
        pf.push("discriminator", self.critic.flat_values());
        pf.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pf = ParamFile::read(path)?;
        let h = &pf.header;
        if h["kind"] != "aae" {
            return Err(Error::format(path, "not an aae parameter file"));
        }
        let bad = |what: &str| Error::format(path, format!("missing or invalid {what}"));
        let backbone: BackboneConfig =
            serde_json::from_value(h["backbone"].clone()).map_err(|_| bad("backbone"))?;
        let critic_hidden: Vec<usize> =
            serde_json::from_value(h["critic_hidden"].clone()).map_err(|_| bad("critic_hidden"))?;
        let dim = |k: &str| h[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(k));
        let mut aae = Aae::new(
            backbone,
            &critic_hidden,
            dim("patch_size")?,
            dim("input_depth")?,
            dim("output_depth")?,
            0,
        )?;
        let enc = pf.block("encoder").ok_or_else(|| bad("encoder block"))?;
        let n_body = aae.encoder.num_values();
        if enc.len() != n_body + aae.head.num_values() {
            return Err(bad("encoder block"));
        }
        aae.encoder.load_flat(&enc[..n_body])?;
        aae.head.load_flat(&enc[n_body..])?;
        let dec = pf.block("decoder").ok_or_else(|| bad("decoder block"))?;
        aae.decoder.load_flat(dec).map_err(|_| bad("decoder block"))?;
        let disc = pf.block("discriminator").ok_or_else(|| bad("discriminator block"))?;
        aae.critic.load_flat(disc).map_err(|_| bad("discriminator block"))?;
        Ok(aae)
    }
}

impl Module for Aae {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p.extend(self.decoder.params());
        p.extend(self.critic.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.critic.params_mut());
        p
    }
}

/// Trains on every patch: encode view 2, predict view 1 (or view 2 again in
/// self-reconstruction mode). Each batch runs a reconstruction update, a
/// clipped critic update and an encoder-only generator update.
/// History columns: mse, d_loss, g_loss.
pub fn train_aae(
    aae: &mut Aae,
    patches: &PatchSet,
    split: &ChannelSplit,
    config: &AaeConfig,
) -> Result<LossHistory> {
    let (inp, tgt) = views(split, config.self_reconstruction, false);
    if split.total_channels != patches.channels
        || aae.input_depth != inp.len()
        || aae.output_depth != tgt.len()
        || aae.patch_size != patches.patch_size
    {
        return Err(Error::arg(
            "aae geometry does not match the patches and channel split",
        ));
    }
    let mut history = LossHistory::new(&["mse", "d_loss", "g_loss"]);
    let mut shuffle = rng::seeded(rng::substream(config.seed, "aae/shuffle"));
    let mut prior = rng::seeded(rng::substream(config.seed, "aae/prior"));
    let mut adam = Adam::new(config.adam);
    let critic_sgd = Sgd {
        lr: config.critic_lr,
    };
    let generator_sgd = Sgd {
        lr: config.generator_lr,
    };
    let latent = aae.latent_dim();
    for epoch in 0..config.epochs {
        let current = split.for_epoch(epoch, config.redraw_split)?;
        let (inp, tgt) = views(&current, config.self_reconstruction, false);
        let mut means = EpochMeans::new(3);
        for (b, idx) in epoch_batches(patches.len(), config.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let x = view_batch(patches, &idx, &inp);
            let t = view_batch(patches, &idx, &tgt);

            aae.zero_grad();
            let mse = aae.reconstruction_step(&x, t.data(), Mode::Train)?;
            {
                let mut group: Vec<&mut Param> = aae.encoder.params_mut();
                group.extend(aae.head.params_mut());
                group.extend(aae.decoder.params_mut());
                adam.step(&mut group);
            }

            let fake = aae.encode_with(&x, Mode::Frozen)?;
            let real = Tensor::new(
                vec![idx.len(), latent],
                standard_normal(&mut prior, idx.len() * latent),
            )?;
            aae.critic.zero_grad();
            let stats = aae.critic_step(&real, &fake)?;
            critic_sgd.step(&mut aae.critic.params_mut());
            clip_discriminator(&mut aae.critic, config.clip)?;

            let mut generator = Generator {
                encoder: &mut aae.encoder,
                head: &mut aae.head,
            };
            generator.zero_grad();
            let g_loss = aae.generator_step(&x, Mode::Frozen)?;
            let mut generator = Generator {
                encoder: &mut aae.encoder,
                head: &mut aae.head,
            };
            generator_sgd.step(&mut generator.params_mut());

            if !(mse.is_finite() && stats.d_loss.is_finite() && g_loss.is_finite()) {
                return Err(Error::Numeric {
                    stage: "aae",
                    epoch,
                    batch: b,
                    detail: format!("mse {mse} d_loss {} g_loss {g_loss}", stats.d_loss),
                });
            }
            means.add(&[mse, stats.d_loss, g_loss]);
        }
        history.push(means.finish());
    }
    Ok(history)
}

/// Codes of every patch's view-2 channels, in patch order.
pub fn encode_patches(aae: &Aae, patches: &PatchSet, channels: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(patches.len() * aae.latent_dim());
    let all: Vec<usize> = (0..patches.len()).collect();
    for idx in all.chunks(256) {
        let x = view_batch(patches, idx, channels);
        rows.extend(aae.encode(&x)?.into_data());
    }
    Tensor::new(vec![patches.len(), aae.latent_dim()], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VolumeStage;

    #[test]
    fn wgan_examples() {
        let s = wgan_losses(&[0.3, -0.1], &[0.3, -0.1]).unwrap();
        assert_eq!(s.d_loss, 0.0);
        let s = wgan_losses(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((s.d_loss, s.g_loss), (1.0, -1.0));
        let s = wgan_losses(&[3.0], &[-2.0]).unwrap();
        assert_eq!((s.d_loss, s.g_loss), (-5.0, 2.0));
        assert_eq!(s.g_loss + s.d_fake_mean, 0.0);
        assert!(wgan_losses(&[], &[1.0]).is_err());
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            volume_stages: vec![VolumeStage {
                depth_kernel: 1,
                spatial_kernel: 3,
                channels: 2,
            }],
            plane_kernel: 3,
            plane_channels: 3,
            pool: 2,
            hidden: 6,
            latent: 4,
        }
    }

    #[test]
    fn clipping() {
        let mut aae = Aae::new(small(), &[5, 3], 5, 2, 2, 3).unwrap();
        for p in aae.critic.params_mut() {
            p.value.iter_mut().for_each(|v| *v *= 100.0);
        }
        let first = aae.critic.params()[0].value[0];
        clip_discriminator(&mut aae.critic, 0.01).unwrap();
        let max = aae
            .critic
            .flat_values()
            .into_iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max, 0.01);
        assert_eq!(aae.critic.params()[0].value[0], first.clamp(-0.01, 0.01));
        let before = aae.critic.flat_values();
        clip_discriminator(&mut aae.critic, 0.01).unwrap();
        assert_eq!(before, aae.critic.flat_values());
        assert!(clip_discriminator(&mut aae.critic, 0.0).is_err());
    }

    #[test]
    fn encode_shapes_and_zero_head() {
        let mut aae = Aae::new(small(), &[5], 5, 2, 2, 3).unwrap();
        let x = Tensor::zeros(vec![3, 1, 2, 5, 5]);
        let z = aae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 4]);
        assert_eq!(z, aae.encode(&x).unwrap());
        aae.head = Linear::zeroed(6, 4);
        assert!(aae.encode(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let aae = Aae::new(small(), &[5, 3], 5, 2, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aae.bin");
        aae.save(&path, 4).unwrap();
        let back = Aae::load(&path).unwrap();
        assert_eq!(back.flat_values(), aae.flat_values());
    }
}
