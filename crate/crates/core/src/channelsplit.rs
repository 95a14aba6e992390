//! Channel partitions that turn one patch into two views.
//!
//! All fractional channel counts use floor division, so every channel count
//! that meets a strategy's minimum is valid. Whatever the strategy, the two
//! index lists together cover every channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    Parity,
    Sequential,
    Random,
    Overlap,
}

impl SplitStrategy {
    pub const ALL: [SplitStrategy; 4] = [
        SplitStrategy::Parity,
        SplitStrategy::Sequential,
        SplitStrategy::Random,
        SplitStrategy::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitStrategy::Parity => "parity",
            SplitStrategy::Sequential => "sequential",
            SplitStrategy::Random => "random",
            SplitStrategy::Overlap => "overlap",
        }
    }

    pub fn min_channels(self) -> usize {
        match self {
            SplitStrategy::Parity | SplitStrategy::Sequential => 2,
            SplitStrategy::Overlap => 3,
            SplitStrategy::Random => 6,
        }
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown split strategy {s:?}")))
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub strategy: SplitStrategy,
    pub indices1: Vec<usize>,
    pub indices2: Vec<usize>,
    pub total_channels: usize,
    /// Only meaningful for the random strategy.
    pub seed: u64,
}

fn check(strategy: SplitStrategy, c: usize) -> Result<()> {
    if c < strategy.min_channels() {
        return Err(Error::arg(format!(
            "{strategy} split needs at least {} channels, got {c}",
            strategy.min_channels()
        )));
    }
    Ok(())
}

/// Even offsets `0, 2, 4, ...` versus odd offsets `1, 3, 5, ...`.
pub fn parity_split(c: usize) -> Result<ChannelSplit> {
    check(SplitStrategy::Parity, c)?;
    Ok(ChannelSplit {
        strategy: SplitStrategy::Parity,
        indices1: (0..c).step_by(2).collect(),
        indices2: (1..c).step_by(2).collect(),
        total_channels: c,
        seed: 0,
    })
}

pub fn sequential_split(c: usize) -> Result<ChannelSplit> {
    check(SplitStrategy::Sequential, c)?;
    Ok(ChannelSplit {
        strategy: SplitStrategy::Sequential,
        indices1: (0..c / 2).collect(),
        indices2: (c / 2..c).collect(),
        total_channels: c,
        seed: 0,
    })
}

/// First half plus `floor(C/6)` channels drawn without replacement from the
/// second half, against the fixed last two thirds.
pub fn random_split(c: usize, seed: u64) -> Result<ChannelSplit> {
    check(SplitStrategy::Random, c)?;
    let mut rng = rng::seeded(seed);
    let extra = sample_without_replacement(&mut rng, c / 2..c, c / 6);
    let mut indices1: Vec<usize> = (0..c / 2).chain(extra).collect();
    indices1.sort_unstable();
    Ok(ChannelSplit {
        strategy: SplitStrategy::Random,
        indices1,
        indices2: (c / 3..c).collect(),
        total_channels: c,
        seed,
    })
}

fn sample_without_replacement(
    rng: &mut impl Rng,
    pool: std::ops::Range<usize>,
    count: usize,
) -> Vec<usize> {
    let mut pool: Vec<usize> = pool.collect();
    (0..count)
        .map(|_| {
            let j = rng.gen_range(0..pool.len());
            pool.swap_remove(j)
        })
        .collect()
}

pub fn overlap_split(c: usize) -> Result<ChannelSplit> {
    check(SplitStrategy::Overlap, c)?;
    Ok(ChannelSplit {
        strategy: SplitStrategy::Overlap,
        indices1: (0..2 * c / 3).collect(),
        indices2: (c / 3..c).collect(),
        total_channels: c,
        seed: 0,
    })
}

impl ChannelSplit {
    pub fn build(strategy: SplitStrategy, c: usize, seed: u64) -> Result<Self> {
        match strategy {
            SplitStrategy::Parity => parity_split(c),
            SplitStrategy::Sequential => sequential_split(c),
            SplitStrategy::Random => random_split(c, seed),
            SplitStrategy::Overlap => overlap_split(c),
        }
    }

    /// Split used during training epoch `epoch`. Only the random strategy
    /// changes between epochs, and only when `redraw` is set; epoch 0 always
    /// reuses the base draw, which is also the one used for encoding.
    pub fn for_epoch(&self, epoch: usize, redraw: bool) -> Result<Self> {
        if self.strategy != SplitStrategy::Random || !redraw || epoch == 0 {
            return Ok(self.clone());
        }
        let seed = rng::substream_indexed(self.seed, "epoch", epoch as u64);
        let mut split = random_split(self.total_channels, seed)?;
        split.seed = self.seed;
        Ok(split)
    }

    pub fn overlap(&self) -> Vec<usize> {
        self.indices1
            .iter()
            .copied()
            .filter(|i| self.indices2.binary_search(i).is_ok())
            .collect()
    }

    pub fn covers_all(&self) -> bool {
        let mut seen = vec![false; self.total_channels];
        for &i in self.indices1.iter().chain(&self.indices2) {
            if i >= self.total_channels {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

impl fmt::Display for ChannelSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            f,
            "strategy: {} (C = {}, seed = {})",
            self.strategy, self.total_channels, self.seed
        )?;
        writeln!(f, "view 1 ({}): {}", self.indices1.len(), join(&self.indices1))?;
        write!(f, "view 2 ({}): {}", self.indices2.len(), join(&self.indices2))
    }
}

/// Gathers the two channel views of a `size x size x C` patch, keeping the
/// (row, col, channel) layout and the listed channel order.
pub fn apply_split(patch: &[f64], size: usize, split: &ChannelSplit) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = split.total_channels;
    if patch.len() != size * size * c {
        return Err(Error::arg(format!(
            "patch has {} values, expected {size}x{size}x{c}",
            patch.len()
        )));
    }
    let gather = |idx: &[usize]| -> Vec<f64> {
        patch
            .chunks(c)
            .flat_map(|px| idx.iter().map(move |&i| px[i]))
            .collect()
    };
    Ok((gather(&split.indices1), gather(&split.indices2)))
}

/// Gathers one view in channel-major `(channel, row, col)` layout, the
/// input layout of the volumetric encoders.
pub fn gather_channel_major(patch: &[f64], size: usize, total: usize, idx: &[usize], out: &mut [f64]) {
    let plane = size * size;
    for (slot, &ch) in idx.iter().enumerate() {
        let dst = &mut out[slot * plane..(slot + 1) * plane];
        for (d, px) in dst.iter_mut().zip(patch.chunks(total)) {
            *d = px[ch];
        }
    }
}
