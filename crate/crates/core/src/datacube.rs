//! Hyperspectral cubes, ground truth, PCA reduction, patch extraction and
//! stratified train/test splitting.
//!
//! On-disk containers are a raw little-endian payload plus a JSON sidecar
//! stored next to it as `<payload>.json`:
//!
//! * cube: `f32` values in (row, col, channel) order, sidecar
//!   `{"height", "width", "channels"}` (optional `"wavelength_note"`);
//! * ground truth: `u16` labels in row order, sidecar
//!   `{"height", "width", "num_classes", "class_names"}`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::gemm;
use crate::rng;

/// Raw `height x width x channels` reflectance volume, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub wavelength_note: String,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::arg("cube dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::arg(format!(
                "cube {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            wavelength_note: String::new(),
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeSidecar {
    height: usize,
    width: usize,
    channels: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    wavelength_note: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelSidecar {
    height: usize,
    width: usize,
    num_classes: usize,
    #[serde(default)]
    class_names: Vec<String>,
}

/// Location of the JSON sidecar belonging to a payload file.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(payload: &Path) -> Result<T> {
    let side = sidecar_path(payload);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::format(&side, format!("cannot read sidecar: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&side, format!("corrupt sidecar: {e}")))
}

fn write_sidecar<T: Serialize>(payload: &Path, value: &T) -> Result<()> {
    let side = sidecar_path(payload);
    let text = serde_json::to_string_pretty(value).expect("sidecar serializes");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let side: CubeSidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = side.height * side.width * side.channels;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "sidecar declares {}x{}x{} = {expected} floats, payload holds {} bytes",
                side.height,
                side.width,
                side.channels,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if side.channels < 2 {
        return Err(Error::format(path, "a cube needs at least two channels"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{} contains non-finite values", path.display())));
    }
    let mut cube = HyperCube::new(side.height, side.width, side.channels, data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    cube.wavelength_note = side.wavelength_note;
    Ok(cube)
}

/// Writes the cube as `f32` payload plus sidecar.
pub fn write_cube(path: &Path, cube: &HyperCube) -> Result<()> {
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &CubeSidecar {
            height: cube.height,
            width: cube.width,
            channels: cube.channels,
            wavelength_note: cube.wavelength_note.clone(),
        },
    )
}

/// Per-pixel class labels: 0 is unlabeled, `1..=K` are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
}

impl GroundTruth {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::arg(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let class_names = if class_names.is_empty() {
            (1..=num_classes).map(|k| format!("class {k}")).collect()
        } else if class_names.len() == num_classes {
            class_names
        } else {
            return Err(Error::arg(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        };
        let mut class_counts = vec![0; num_classes];
        for &l in &labels {
            let l = usize::from(l);
            if l > num_classes {
                return Err(Error::arg(format!("label {l} exceeds class count {num_classes}")));
            }
            if l > 0 {
                class_counts[l - 1] += 1;
            }
        }
        Ok(Self {
            height,
            width,
            labels,
            class_names,
            class_counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labeled(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let side: LabelSidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.height * side.width * 2 {
        return Err(Error::format(
            path,
            format!(
                "sidecar declares {}x{} labels, payload holds {} bytes",
                side.height,
                side.width,
                bytes.len()
            ),
        ));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    GroundTruth::new(
        side.height,
        side.width,
        side.num_classes,
        labels,
        side.class_names,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let bytes: Vec<u8> = gt.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &LabelSidecar {
            height: gt.height,
            width: gt.width,
            num_classes: gt.num_classes(),
            class_names: gt.class_names.clone(),
        },
    )
}

/// Linear channel-space projection onto the leading principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Per-channel divisor applied after centering (all ones unless
    /// unit-variance scaling was requested).
    pub scale: Vec<f64>,
    /// `k` rows of length `channels`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Population variance along each component, descending.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Maps reduced coordinates back to channel space.
    pub fn reconstruct(&self, reduced: &HyperCube) -> Result<HyperCube> {
        if reduced.channels != self.k() {
            return Err(Error::arg("reduced cube does not match the model"));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(reduced.pixels() * c);
        for px in reduced.data.chunks(self.k()) {
            for ch in 0..c {
                let v: f64 = px
                    .iter()
                    .zip(&self.components)
                    .map(|(a, comp)| a * comp[ch])
                    .sum();
                data.push(v * self.scale[ch] + self.mean[ch]);
            }
        }
        HyperCube::new(reduced.height, reduced.width, c, data)
    }
}

pub fn fit_pca(cube: &HyperCube, k: usize) -> Result<PcaModel> {
    fit_pca_with(cube, k, false)
}

/// Fits PCA over all pixels from the channel covariance (population
/// normalization). With `unit_variance` each channel is also divided by its
/// standard deviation before the covariance is formed.
pub fn fit_pca_with(cube: &HyperCube, k: usize, unit_variance: bool) -> Result<PcaModel> {
    let c = cube.channels;
    if k == 0 || k > c {
        return Err(Error::arg(format!("k = {k} must lie in 1..={c}")));
    }
    if cube.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cube contains non-finite values".into()));
    }
    let n = cube.pixels();
    let mut mean = vec![0.0; c];
    for px in cube.data.chunks(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered: Vec<f64> = cube
        .data
        .chunks(c)
        .flat_map(|px| px.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut scale = vec![1.0; c];
    if unit_variance {
        for ch in 0..c {
            let var = centered.iter().skip(ch).step_by(c).map(|v| v * v).sum::<f64>() / n as f64;
            scale[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        for px in centered.chunks_mut(c) {
            for (v, s) in px.iter_mut().zip(&scale) {
                *v /= s;
            }
        }
    }
    let mut cov = vec![0.0; c * c];
    gemm(c, n, c, 1.0 / n as f64, &centered, true, &centered, false, 0.0, &mut cov);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaModel {
        mean,
        scale,
        components,
        explained_variance,
    })
}

pub fn apply_pca(cube: &HyperCube, model: &PcaModel) -> Result<HyperCube> {
    let c = cube.channels;
    if model.channels() != c {
        return Err(Error::arg(format!(
            "model fitted on {} channels, cube has {c}",
            model.channels()
        )));
    }
    let k = model.k();
    let centered: Vec<f64> = cube
        .data
        .chunks(c)
        .flat_map(|px| {
            px.iter()
                .zip(&model.mean)
                .zip(&model.scale)
                .map(|((v, m), s)| (v - m) / s)
        })
        .collect();
    let basis: Vec<f64> = model.components.iter().flatten().copied().collect();
    let mut out = vec![0.0; cube.pixels() * k];
    gemm(cube.pixels(), c, k, 1.0, &centered, false, &basis, true, 0.0, &mut out);
    let mut reduced = HyperCube::new(cube.height, cube.width, k, out)?;
    reduced.wavelength_note = format!("{k} principal components");
    Ok(reduced)
}

/// Labeled `s x s x k` neighborhoods of a (reduced) cube.
///
/// Patches are materialized on demand from a mirror-padded copy of the cube,
/// in row-major order of their centre pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    padded: Vec<f64>,
    padded_width: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Writes patch `i` in (row, col, channel) order into `out`.
    pub fn write_patch(&self, i: usize, out: &mut [f64]) {
        let (r, c) = self.coords[i];
        let s = self.patch_size;
        let k = self.channels;
        for dr in 0..s {
            let src = ((r + dr) * self.padded_width + c) * k;
            out[dr * s * k..(dr + 1) * s * k].copy_from_slice(&self.padded[src..src + s * k]);
        }
    }

    pub fn patch(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.patch_len()];
        self.write_patch(i, &mut out);
        out
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// One patch per labeled pixel, centred on it. Borders use reflection that
/// excludes the edge sample (`..., 2, 1, 0, 1, 2, ...`).
pub fn extract_patches(cube: &HyperCube, gt: &GroundTruth, s: usize) -> Result<PatchSet> {
    if s % 2 == 0 {
        return Err(Error::arg(format!("patch size {s} must be odd")));
    }
    if (cube.height, cube.width) != (gt.height, gt.width) {
        return Err(Error::arg(format!(
            "cube is {}x{} but ground truth is {}x{}",
            cube.height, cube.width, gt.height, gt.width
        )));
    }
    if s > 2 * cube.height.min(cube.width) {
        return Err(Error::arg(format!(
            "patch size {s} exceeds twice the smaller image side"
        )));
    }
    let r = s / 2;
    let k = cube.channels;
    let (ph, pw) = (cube.height + 2 * r, cube.width + 2 * r);
    let mut padded = Vec::with_capacity(ph * pw * k);
    for pr in 0..ph {
        let row = reflect(pr as isize - r as isize, cube.height);
        for pc in 0..pw {
            let col = reflect(pc as isize - r as isize, cube.width);
            padded.extend_from_slice(cube.pixel(row, col));
        }
    }
    let mut labels = Vec::new();
    let mut coords = Vec::new();
    for row in 0..gt.height {
        for col in 0..gt.width {
            let l = gt.labels[row * gt.width + col];
            if l > 0 {
                labels.push(usize::from(l));
                coords.push((row, col));
            }
        }
    }
    Ok(PatchSet {
        patch_size: s,
        channels: k,
        num_classes: gt.num_classes(),
        labels,
        coords,
        padded,
        padded_width: pw,
    })
}

/// Disjoint train/test index lists into a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

/// Training count for a class of `n` samples: `max(1, floor(fraction * n))`.
///
/// A relative slack of 1e-9 keeps products such as `0.29 * 100` from
/// flooring one short.
pub fn train_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    ((raw + raw.abs() * 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Samples `max(1, floor(fraction * n_c))` training indices per class,
/// visiting classes in ascending label order with one seeded stream.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<IndexSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("fraction {fraction} must lie in (0, 1]")));
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::seeded(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
        let n = members.len();
        let take = train_count(fraction, n);
        let (chosen, rest) = members.partial_shuffle(&mut rng, take);
        train.extend_from_slice(chosen);
        test.extend_from_slice(rest);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(IndexSplit {
        train_indices: train,
        test_indices: test,
        fraction,
        seed,
    })
}
