//! Synthetic labeled cubes built from distinct spectral signatures.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datacube::{GroundTruth, HyperCube};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Noise standard deviation as a fraction of the smallest signature gap.
    pub noise: f64,
    /// Multiplier on the unit-scale signatures (100 gives percent reflectance).
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 30,
            classes: 4,
            noise: 0.1,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: HyperCube,
    pub ground_truth: GroundTruth,
    pub signatures: Vec<Vec<f64>>,
    /// Smallest root-mean-square difference between two signatures.
    pub gap: f64,
    pub sigma: f64,
}

/// Smooth, pairwise distinct reflectance curves.
pub fn signatures(classes: usize, channels: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let phase = k as f64 * 2.0 * PI / classes as f64;
            let slope = (k as f64 - (classes as f64 - 1.0) / 2.0) * 0.2;
            (0..channels)
                .map(|c| {
                    let t = c as f64 / channels.max(2) as f64;
                    0.5 + 0.3 * (2.0 * PI * t + phase).sin() + slope * t
                })
                .collect()
        })
        .collect()
}

fn rms_gap(sigs: &[Vec<f64>]) -> f64 {
    let mut gap = f64::INFINITY;
    for (i, a) in sigs.iter().enumerate() {
        for b in &sigs[i + 1..] {
            let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
            gap = gap.min(d.sqrt());
        }
    }
    gap
}

/// Labels the image in blocks: two row bands, `ceil(K/2)` column bands.
pub fn block_label(row: usize, col: usize, spec: &SyntheticSpec) -> usize {
    let col_bands = spec.classes.div_ceil(2);
    let rb = row * 2 / spec.height;
    let cb = col * col_bands / spec.width;
    (rb * col_bands + cb) % spec.classes + 1
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if spec.classes < 2 || spec.height < 2 || spec.width < 2 || spec.channels < 2 {
        return Err(Error::arg("synthetic scene needs >= 2 classes, rows, columns and channels"));
    }
    if !(spec.amplitude > 0.0) {
        return Err(Error::arg("synthetic amplitude must be positive"));
    }
    let mut sigs = signatures(spec.classes, spec.channels);
    for v in sigs.iter_mut().flatten() {
        *v *= spec.amplitude;
    }
    let gap = rms_gap(&sigs);
    let sigma = spec.noise * gap;
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::arg(e.to_string()))?;
    let mut r = rng::seeded(rng::substream(spec.seed, "synthetic"));
    let mut data = Vec::with_capacity(spec.height * spec.width * spec.channels);
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let label = block_label(row, col, spec);
            labels.push(label as u16);
            for v in &sigs[label - 1] {
                data.push((v + normal.sample(&mut r)) as f32 as f64);
            }
        }
    }
    let cube = HyperCube::new(spec.height, spec.width, spec.channels, data)?;
    let names = (1..=spec.classes).map(|k| format!("signature {k}")).collect();
    let ground_truth = GroundTruth::new(spec.height, spec.width, spec.classes, labels, names)?;
    Ok(SyntheticScene {
        cube,
        ground_truth,
        signatures: sigs,
        gap,
        sigma,
    })
}
