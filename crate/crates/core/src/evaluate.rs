//! Linear max-margin classification of extracted features and accuracy
//! reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::IndexSplit;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Project iterates onto the ball of radius `1/sqrt(reg)`.
    pub project: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            epochs: 100,
            seed: 0,
            project: true,
        }
    }
}

/// One-vs-rest linear classifiers over standardized features. Each weight
/// row holds `dim` coefficients followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub config: SvmConfig,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            row.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((x, m), s)| (x - m) / s),
        );
        out.push(1.0);
    }

    /// Per-class scores of one raw feature row.
    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(row.len() + 1);
        self.standardize(row, &mut x);
        self.weights.iter().map(|w| dot(w, &x)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pegasos subgradient descent on the hinge loss of one binary problem.
fn pegasos(xs: &[Vec<f64>], ys: &[f64], config: &SvmConfig, seed: u64) -> Vec<f64> {
    let dim = xs.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut r = rng::seeded(seed);
    let radius = 1.0 / config.reg.sqrt();
    let mut t = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (config.reg * t as f64);
            let margin = ys[i] * dot(&w, &xs[i]);
            let shrink = 1.0 - eta * config.reg;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (v, x) in w.iter_mut().zip(&xs[i]) {
                    *v += eta * ys[i] * x;
                }
            }
            if config.project {
                let n = dot(&w, &w).sqrt();
                if n > radius {
                    w.iter_mut().for_each(|v| *v *= radius / n);
                }
            }
        }
    }
    w
}

/// Trains on the split's training rows; standardization uses training
/// statistics only. The classes are the distinct labels in `labels`, and
/// every one of them must occur in the training rows.
pub fn train_svm(
    features: &Tensor,
    labels: &[usize],
    split: &IndexSplit,
    config: &SvmConfig,
) -> Result<SvmModel> {
    if features.shape().len() != 2 || features.batch() != labels.len() {
        return Err(Error::arg(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if !(config.reg > 0.0) {
        return Err(Error::arg("svm regularization must be positive"));
    }
    if let Some(&i) = split.train_indices.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::arg(format!("train index {i} out of range")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for &c in &classes {
        if !split.train_indices.iter().any(|&i| labels[i] == c) {
            return Err(Error::arg(format!("class {c} has no training samples")));
        }
    }
    let d = features.row_len();
    let n = split.train_indices.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &split.train_indices {
        for (m, x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; d];
    for &i in &split.train_indices {
        for ((s, x), m) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / n).sqrt().max(STD_FLOOR));

    let mut model = SvmModel {
        classes,
        mean,
        std,
        weights: Vec::new(),
        config: *config,
    };
    let mut xs = Vec::with_capacity(split.train_indices.len());
    for &i in &split.train_indices {
        let mut x = Vec::with_capacity(d + 1);
        model.standardize(features.row(i), &mut x);
        xs.push(x);
    }
    model.weights = model
        .classes
        .par_iter()
        .map(|&c| {
            let ys: Vec<f64> = split
                .train_indices
                .iter()
                .map(|&i| if labels[i] == c { 1.0 } else { -1.0 })
                .collect();
            let seed = rng::substream_indexed(config.seed, "svm", c as u64);
            pegasos(&xs, &ys, config, seed)
        })
        .collect();
    Ok(model)
}

/// Highest-scoring class per row; ties go to the lowest class.
pub fn classify(model: &SvmModel, features: &Tensor) -> Result<Vec<usize>> {
    if features.shape().len() != 2 || features.row_len() != model.dim() {
        return Err(Error::arg(format!(
            "model expects {}-dimensional features, got {:?}",
            model.dim(),
            features.shape()
        )));
    }
    Ok((0..features.batch())
        .map(|i| {
            let scores = model.scores(features.row(i));
            let mut best = 0;
            for (k, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = k;
                }
            }
            model.classes[best]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    /// Percent correct per class; `None` for classes absent from the
    /// evaluated samples, which are also left out of the average.
    #[serde(rename = "per_class")]
    pub per_class_acc: Vec<Option<f64>>,
    /// `confusion[actual - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(predicted: &[usize], actual: &[usize], k: usize) -> Result<MetricsReport> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::arg(format!(
            "need equal nonempty label lists, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &a) in predicted.iter().zip(actual) {
        if !(1..=k).contains(&p) || !(1..=k).contains(&a) {
            return Err(Error::arg(format!("label pair ({a}, {p}) outside 1..={k}")));
        }
        confusion[a - 1][p - 1] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let oa = 100.0 * correct as f64 / predicted.len() as f64;
    let per_class_acc: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| 100.0 * row[c] as f64 / total as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        oa,
        aa,
        per_class_acc,
        confusion,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `class,accuracy` rows; classes absent from the evaluation are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,accuracy\n");
        for (c, acc) in self.per_class_acc.iter().enumerate() {
            match acc {
                Some(a) => writeln!(out, "{},{a:.2}", c + 1).unwrap(),
                None => writeln!(out, "{},", c + 1).unwrap(),
            }
        }
        writeln!(out, "OA,{:.2}", self.oa).unwrap();
        writeln!(out, "AA,{:.2}", self.aa).unwrap();
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(train: Vec<usize>, test: Vec<usize>) -> IndexSplit {
        IndexSplit {
            train_indices: train,
            test_indices: test,
            fraction: 0.5,
            seed: 0,
        }
    }

    #[test]
    fn hand_counted_metrics() {
        let actual: Vec<usize> = [vec![1; 10], vec![2; 10]].concat();
        let predicted: Vec<usize> = [vec![1; 9], vec![2; 1], vec![2; 5], vec![1; 5]].concat();
        let m = compute_metrics(&predicted, &actual, 2).unwrap();
        assert_eq!((m.oa, m.aa), (70.0, 70.0));
        assert_eq!(m.confusion, vec![vec![9, 1], vec![5, 5]]);

        let actual: Vec<usize> = [vec![1; 100], vec![2; 2]].concat();
        let predicted: Vec<usize> = [vec![1; 90], vec![2; 10], vec![2, 1]].concat();
        let m = compute_metrics(&predicted, &actual, 2).unwrap();
        assert!((m.oa - 9100.0 / 102.0).abs() < 1e-10);
        assert!((m.oa - 89.22).abs() < 0.005);
        assert!((m.aa - 70.0).abs() < 1e-10);
    }

    #[test]
    fn perfect_and_invalid() {
        let m = compute_metrics(&[1, 2, 3], &[1, 2, 3], 3).unwrap();
        assert_eq!((m.oa, m.aa), (100.0, 100.0));
        assert!(compute_metrics(&[1, 4], &[1, 2], 3).is_err());
        assert!(compute_metrics(&[], &[], 3).is_err());
        assert!(compute_metrics(&[1], &[0], 3).is_err());
    }

    #[test]
    fn absent_class_is_skipped_in_average() {
        let m = compute_metrics(&[1, 1], &[1, 1], 2).unwrap();
        assert_eq!(m.per_class_acc, vec![Some(100.0), None]);
        assert_eq!(m.aa, 100.0);
        assert!(m.to_csv().contains("\n2,\n"));
        let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(json["per_class"][1], serde_json::Value::Null);
    }

    #[test]
    fn separable_clusters_train_perfectly() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.1;
            rows.push(vec![2.0 + t.sin(), 1.0 + t.cos()]);
            labels.push(1);
            rows.push(vec![-2.0 + t.cos(), -1.0 + t.sin()]);
            labels.push(2);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let s = split(all.clone(), vec![]);
        let model = train_svm(&x, &labels, &s, &SvmConfig::default()).unwrap();
        assert_eq!(classify(&model, &x).unwrap(), labels);
        let again = train_svm(&x, &labels, &s, &SvmConfig::default()).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn tie_and_single_class() {
        let model = SvmModel {
            classes: vec![1, 2, 3],
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
            weights: vec![vec![0.0; 3]; 3],
            config: SvmConfig::default(),
        };
        let x = Tensor::from_rows(&[vec![1.0, -4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(classify(&model, &x).unwrap(), vec![1, 1]);
        assert!(classify(&model, &Tensor::zeros(vec![1, 3])).is_err());

        let feats = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = split(vec![0, 1], vec![2]);
        let model = train_svm(&feats, &[4, 4, 4], &s, &SvmConfig::default()).unwrap();
        assert_eq!(classify(&model, &feats).unwrap(), vec![4, 4, 4]);
    }

    #[test]
    fn missing_training_class_is_rejected() {
        let feats = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let s = split(vec![0], vec![1]);
        assert!(matches!(
            train_svm(&feats, &[1, 2], &s, &SvmConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn scores_match_brute_force() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % 3;
            let t = i as f64;
            rows.push(vec![c as f64 * 3.0 + (t * 0.7).sin(), (t * 1.3).cos() - c as f64]);
            labels.push(c + 1);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let s = split((0..30).step_by(2).collect(), (1..30).step_by(2).collect());
        let model = train_svm(&x, &labels, &s, &SvmConfig::default()).unwrap();
        let pred = classify(&model, &x).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let z: Vec<f64> = (0..2).map(|j| (row[j] - model.mean[j]) / model.std[j]).collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, w) in model.weights.iter().enumerate() {
                let score = w[0] * z[0] + w[1] * z[1] + w[2];
                if score > best.0 {
                    best = (score, k);
                }
            }
            assert_eq!(pred[i], model.classes[best.1]);
        }
    }
}
