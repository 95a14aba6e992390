//! Volumetric encoder/decoder pair shared by both autoencoders.
//!
//! The encoder runs unpadded 3-D convolutions over `(channel, row, col)`
//! views, folds the remaining band depth into feature maps, applies one
//! planar convolution, pools to a fixed grid and ends in a hidden affine
//! layer. The decoder mirrors it and reproduces a `depth x size x size` view.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channelsplit::gather_channel_major;
use crate::datacube::PatchSet;
use crate::error::{Error, Result};
use crate::nn::{AdaptiveAvgPool, BatchNorm, Conv, ConvTranspose, Layer, Linear, Sequential};
use crate::tensor::Tensor;

/// One volumetric stage: band-axis kernel, spatial kernel, output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeStage {
    pub depth_kernel: usize,
    pub spatial_kernel: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub volume_stages: Vec<VolumeStage>,
    pub plane_kernel: usize,
    pub plane_channels: usize,
    /// Side of the pooled grid feeding the affine layers.
    pub pool: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |depth_kernel, channels| VolumeStage {
            depth_kernel,
            spatial_kernel: 3,
            channels,
        };
        Self {
            volume_stages: vec![stage(7, 8), stage(5, 16), stage(3, 32)],
            plane_kernel: 3,
            plane_channels: 64,
            pool: 4,
            hidden: 512,
            latent: 128,
        }
    }
}

impl BackboneConfig {
    fn check(&self) -> Result<()> {
        let nonzero = self.plane_kernel > 0
            && self.plane_channels > 0
            && self.pool > 0
            && self.hidden > 0
            && self.latent > 0
            && !self.volume_stages.is_empty()
            && self
                .volume_stages
                .iter()
                .all(|s| s.depth_kernel > 0 && s.spatial_kernel > 0 && s.channels > 0);
        if nonzero {
            Ok(())
        } else {
            Err(Error::arg("backbone sizes must all be positive"))
        }
    }

    /// Band depth left after the volumetric stages.
    pub fn folded_depth(&self, depth: usize) -> Result<usize> {
        let shrink: usize = self.volume_stages.iter().map(|s| s.depth_kernel - 1).sum();
        if depth <= shrink {
            return Err(Error::arg(format!(
                "view of {depth} channels is too shallow for the band kernels (needs > {shrink})"
            )));
        }
        Ok(depth - shrink)
    }

    /// Spatial side left after all convolutions.
    pub fn reduced_side(&self, size: usize) -> Result<usize> {
        let shrink: usize = self
            .volume_stages
            .iter()
            .map(|s| s.spatial_kernel - 1)
            .sum::<usize>()
            + self.plane_kernel
            - 1;
        if size <= shrink {
            return Err(Error::arg(format!(
                "patch size {size} is too small for the spatial kernels (needs > {shrink})"
            )));
        }
        Ok(size - shrink)
    }

    fn last_channels(&self) -> usize {
        self.volume_stages.last().map_or(1, |s| s.channels)
    }

    /// Layers from a `(1, depth, size, size)` view to a `hidden` vector.
    pub fn encoder(&self, depth: usize, size: usize, rng: &mut impl Rng) -> Result<Sequential> {
        self.check()?;
        let folded = self.folded_depth(depth)?;
        let side = self.reduced_side(size)?;
        let mut layers = Vec::new();
        let mut prev = 1;
        let mut spatial = size;
        for s in &self.volume_stages {
            let k = [s.depth_kernel, s.spatial_kernel, s.spatial_kernel];
            layers.push(Layer::Conv(Conv::new(prev, s.channels, k, [0; 3], rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(s.channels)));
            layers.push(Layer::Relu);
            prev = s.channels;
            spatial -= s.spatial_kernel - 1;
        }
        let stacked = prev * folded;
        layers.push(Layer::Reshape(vec![stacked, 1, spatial, spatial]));
        let k = [1, self.plane_kernel, self.plane_kernel];
        layers.push(Layer::Conv(Conv::new(stacked, self.plane_channels, k, [0; 3], rng)));
        layers.push(Layer::BatchNorm(BatchNorm::new(self.plane_channels)));
        layers.push(Layer::Relu);
        assert_eq!(spatial - (self.plane_kernel - 1), side);
        layers.push(Layer::Pool(AdaptiveAvgPool {
            out: [self.pool, self.pool],
        }));
        let flat = self.plane_channels * self.pool * self.pool;
        layers.push(Layer::Reshape(vec![flat]));
        layers.push(Layer::Linear(Linear::new(flat, self.hidden, rng)));
        layers.push(Layer::Relu);
        Ok(Sequential::new(layers))
    }

    /// Layers from a `latent` code to a `(1, depth, size, size)` view. The
    /// last layer is linear.
    pub fn decoder(&self, depth: usize, size: usize, rng: &mut impl Rng) -> Result<Sequential> {
        self.check()?;
        let folded = self.folded_depth(depth)?;
        let side = self.reduced_side(size)?;
        let flat = self.plane_channels * self.pool * self.pool;
        let last = self.last_channels();
        let mut layers = vec![
            Layer::Linear(Linear::new(self.latent, self.hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(self.hidden, flat, rng)),
            Layer::Relu,
            Layer::Reshape(vec![self.plane_channels, 1, self.pool, self.pool]),
            Layer::Pool(AdaptiveAvgPool { out: [side, side] }),
        ];
        let k = [1, self.plane_kernel, self.plane_kernel];
        let stacked = last * folded;
        layers.push(Layer::ConvTranspose(ConvTranspose::new(
            self.plane_channels,
            stacked,
            k,
            [0; 3],
            rng,
        )));
        layers.push(Layer::BatchNorm(BatchNorm::new(stacked)));
        layers.push(Layer::Relu);
        let spatial = side + self.plane_kernel - 1;
        layers.push(Layer::Reshape(vec![last, folded, spatial, spatial]));
        let stages = &self.volume_stages;
        for (i, s) in stages.iter().enumerate().rev() {
            let out = if i == 0 { 1 } else { stages[i - 1].channels };
            let k = [s.depth_kernel, s.spatial_kernel, s.spatial_kernel];
            layers.push(Layer::ConvTranspose(ConvTranspose::new(
                s.channels,
                out,
                k,
                [0; 3],
                rng,
            )));
            if i > 0 {
                layers.push(Layer::BatchNorm(BatchNorm::new(out)));
                layers.push(Layer::Relu);
            }
        }
        Ok(Sequential::new(layers))
    }
}

/// Gathers the listed patches into a `(batch, 1, |channels|, s, s)` view.
pub fn view_batch(patches: &PatchSet, idx: &[usize], channels: &[usize]) -> Tensor {
    let s = patches.patch_size;
    let per = channels.len() * s * s;
    let mut data = vec![0.0; idx.len() * per];
    data.par_chunks_mut(per)
        .zip(idx.par_iter())
        .for_each_init(
            || vec![0.0; patches.patch_len()],
            |buf, (out, &i)| {
                patches.write_patch(i, buf);
                gather_channel_major(buf, s, patches.channels, channels, out);
            },
        );
    Tensor::new(vec![idx.len(), 1, channels.len(), s, s], data).expect("sizes agree")
}

/// Shuffled batches of `0..n` for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &Tensor, target: &[f64]) -> (f64, Tensor) {
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut sum = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target) {
        let d = *g - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    (sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng;

    #[test]
    fn default_shapes_round_trip() {
        let cfg = BackboneConfig::default();
        let mut r = rng::seeded(1);
        let mut enc = cfg.encoder(15, 9, &mut r).unwrap();
        let mut dec = cfg.decoder(15, 9, &mut r).unwrap();
        let x = Tensor::zeros(vec![2, 1, 15, 9, 9]);
        let (h, _) = enc.forward(x, Mode::Train).unwrap();
        assert_eq!(h.shape(), &[2, 512]);
        let z = Tensor::zeros(vec![2, 128]);
        let (y, _) = dec.forward(z, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 1, 15, 9, 9]);
    }

    #[test]
    fn geometry_limits() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.folded_depth(13).unwrap(), 1);
        assert!(cfg.folded_depth(12).is_err());
        assert_eq!(cfg.reduced_side(9).unwrap(), 1);
        assert!(cfg.reduced_side(8).is_err());
        assert_eq!(cfg.reduced_side(27).unwrap(), 19);
    }

    #[test]
    fn mse_gradient_is_scaled_difference() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let (l, g) = mse_with_grad(&p, &[0.0, 1.0]);
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }
}
