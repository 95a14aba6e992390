//! Stage graph, hash-stamped artifact cache and the end-to-end run.
//!
//! Every stage owns a directory under the output root. A stage is fresh when
//! its `stamp.json` carries the key computed from the current config; keys
//! hash the stage's own settings together with the keys of its inputs, so a
//! change reaches exactly the edited stage and everything downstream.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crossview_core::aae::{self, Aae};
use crossview_core::channelsplit::ChannelSplit;
use crossview_core::contrast::{extract_features, train_contrast, ContrastNets, FeatureEncoder, SnapshotSelection};
use crossview_core::datacube::{
    apply_pca, extract_patches, fit_pca_with, load_cube, load_ground_truth, stratified_split,
    write_ground_truth, GroundTruth, HyperCube, PatchSet,
};
use crossview_core::evaluate::{classify, compute_metrics, train_svm, MetricsReport, SvmModel};
use crossview_core::nn::Module;
use crossview_core::synthetic::generate;
use crossview_core::tensor::Tensor;
use crossview_core::vae::{self, Vae};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, FeatureSource, RunConfig};
use crate::error::{CliError, Result, StageContext};
use crate::matrix::{read_matrix, write_matrix, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pca,
    Patches,
    Split,
    Vae,
    Aae,
    Contrast,
    Extract(FeatureSource),
    Classify(FeatureSource),
    Evaluate(FeatureSource),
}

impl Stage {
    /// Subcommand that runs this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Pca => "pca",
            Stage::Patches => "patches",
            Stage::Split => "describe-split",
            Stage::Vae => "train-vae",
            Stage::Aae => "train-aae",
            Stage::Contrast => "train-contrast",
            Stage::Extract(_) => "extract",
            Stage::Classify(_) => "classify",
            Stage::Evaluate(_) => "evaluate",
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            Stage::Pca => "pca",
            Stage::Patches => "patches",
            Stage::Split => "channel split",
            Stage::Vae => "vae",
            Stage::Aae => "aae",
            Stage::Contrast => "contrast",
            Stage::Extract(_) => "features",
            Stage::Classify(_) => "classifier",
            Stage::Evaluate(_) => "metrics",
        }
    }

    pub fn dir_name(self) -> String {
        match self {
            Stage::Pca => "pca".into(),
            Stage::Patches => "patches".into(),
            Stage::Split => "split".into(),
            Stage::Vae => "vae".into(),
            Stage::Aae => "aae".into(),
            Stage::Contrast => "contrast".into(),
            Stage::Extract(s) => format!("extract-{s}"),
            Stage::Classify(s) => format!("classify-{s}"),
            Stage::Evaluate(s) => format!("evaluate-{s}"),
        }
    }

    /// Stages whose artifacts this one reads directly.
    pub fn upstream(self) -> Vec<Stage> {
        match self {
            Stage::Pca | Stage::Split => vec![],
            Stage::Patches => vec![Stage::Pca],
            Stage::Vae | Stage::Aae => vec![Stage::Patches, Stage::Split],
            Stage::Contrast => vec![Stage::Vae, Stage::Aae],
            Stage::Extract(FeatureSource::Vae) => vec![Stage::Vae],
            Stage::Extract(FeatureSource::Aae) => vec![Stage::Aae],
            Stage::Extract(FeatureSource::Contrast) => vec![Stage::Contrast],
            Stage::Classify(s) => vec![Stage::Extract(s), Stage::Patches],
            Stage::Evaluate(s) => vec![Stage::Classify(s)],
        }
    }

    /// Resolves a subcommand name; feature-dependent stages take `source`.
    pub fn from_command(name: &str, source: FeatureSource) -> Option<Stage> {
        Some(match name {
            "pca" => Stage::Pca,
            "patches" => Stage::Patches,
            "describe-split" => Stage::Split,
            "train-vae" => Stage::Vae,
            "train-aae" => Stage::Aae,
            "train-contrast" => Stage::Contrast,
            "extract" => Stage::Extract(source),
            "classify" => Stage::Classify(source),
            "evaluate" => Stage::Evaluate(source),
            _ => return None,
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn key_of(value: Value) -> String {
    sha_hex(value.to_string().as_bytes())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha_hex(&bytes))
}

/// Content key of the input data: file digests, or the generator settings.
fn data_key(data: &DataSource) -> Result<String> {
    match data {
        DataSource::Files { cube, ground_truth } => {
            let side = |p: &Path| crossview_core::datacube::sidecar_path(p);
            Ok(key_of(json!({
                "cube": file_digest(cube)?,
                "cube_sidecar": file_digest(&side(cube))?,
                "labels": file_digest(ground_truth)?,
                "labels_sidecar": file_digest(&side(ground_truth))?,
            })))
        }
        DataSource::Synthetic(spec) => Ok(key_of(json!({ "synthetic": spec }))),
    }
}

fn stage_keys(cfg: &RunConfig) -> Result<HashMap<Stage, String>> {
    let mut k = HashMap::new();
    let data = data_key(&cfg.data)?;
    let pca = key_of(json!({"stage": "pca", "data": data, "pca": cfg.pca}));
    let patches = key_of(json!({"stage": "patches", "pca": pca, "patch_size": cfg.patch_size}));
    let split = key_of(json!({
        "stage": "split",
        "channels": cfg.pca.components,
        "split": cfg.split,
    }));
    let vae = key_of(json!({"stage": "vae", "patches": patches, "split": split, "vae": cfg.vae}));
    let aae = key_of(json!({"stage": "aae", "patches": patches, "split": split, "aae": cfg.aae}));
    let sampling = json!({
        "train_fraction": cfg.train_fraction,
        "sample_seed": cfg.sample_seed,
        "svm": cfg.svm,
    });
    let selection = if cfg.contrast.selection == SnapshotSelection::Best {
        sampling.clone()
    } else {
        Value::Null
    };
    let contrast = key_of(json!({
        "stage": "contrast",
        "vae": vae,
        "aae": aae,
        "contrast": cfg.contrast,
        "selection": selection,
    }));
    for source in FeatureSource::ALL {
        let up = match source {
            FeatureSource::Vae => &vae,
            FeatureSource::Aae => &aae,
            FeatureSource::Contrast => &contrast,
        };
        let extract = key_of(json!({"stage": "extract", "source": source, "from": up}));
        let classify = key_of(json!({
            "stage": "classify",
            "features": extract,
            "patches": patches,
            "sampling": sampling,
        }));
        let evaluate = key_of(json!({"stage": "evaluate", "classify": classify}));
        k.insert(Stage::Extract(source), extract);
        k.insert(Stage::Classify(source), classify);
        k.insert(Stage::Evaluate(source), evaluate);
    }
    k.insert(Stage::Pca, pca);
    k.insert(Stage::Patches, patches);
    k.insert(Stage::Split, split);
    k.insert(Stage::Vae, vae);
    k.insert(Stage::Aae, aae);
    k.insert(Stage::Contrast, contrast);
    Ok(k)
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageShape {
    height: usize,
    width: usize,
    channels: usize,
}

/// Labels and positions of the extracted patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSummary {
    pub count: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Predictions {
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
    predicted: Vec<usize>,
    actual: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Selection {
    selection: SnapshotSelection,
    /// 1-based epoch whose encoder was kept; 0 when no epoch ran.
    epoch: usize,
    scores: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Online encoder applied to both codes of each patch, side by side.
pub fn contrast_features(encoder: &FeatureEncoder, vae_codes: &Tensor, aae_codes: &Tensor) -> Result<Tensor> {
    let f1 = extract_features(encoder, vae_codes).stage("extract")?;
    let f2 = extract_features(encoder, aae_codes).stage("extract")?;
    let d = f1.row_len() + f2.row_len();
    let mut data = Vec::with_capacity(f1.batch() * d);
    for (a, b) in f1.rows().zip(f2.rows()) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    Tensor::new(vec![f1.batch(), d], data).stage("extract")
}

pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    keys: HashMap<Stage, String>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.resolved();
        let root = cfg.output.clone();
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let keys = stage_keys(&cfg)?;
        write_json(&root.join("config.json"), config)?;
        Ok(Self {
            cfg,
            root,
            keys,
            verbose: false,
        })
    }

    /// The config with derived seeds and ablation switches applied.
    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    fn log(&self, stage: Stage, msg: impl fmt::Display) {
        if self.verbose {
            eprintln!("[{stage}] {msg}");
        }
    }

    pub fn is_fresh(&self, stage: Stage) -> bool {
        let path = self.dir(stage).join("stamp.json");
        read_json::<Stamp>(&path).is_ok_and(|s| s.key == self.keys[&stage])
    }

    /// Checks that `stage` and everything it reads from are fresh.
    fn require(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream() {
            self.require(up)?;
        }
        if self.is_fresh(stage) {
            return Ok(());
        }
        let dir = self.dir(stage);
        let reason = if dir.join("stamp.json").exists() {
            format!("{} was built from a different config", dir.display())
        } else {
            format!("nothing in {}", dir.display())
        };
        Err(CliError::Missing {
            stage: stage.command(),
            artifact: stage.artifact(),
            reason,
        })
    }

    /// Runs `stage` unless its artifact is fresh. With `cascade`, stale
    /// upstream stages are rebuilt first; without it they must already be
    /// fresh. Returns whether the stage ran.
    pub fn ensure(&self, stage: Stage, cascade: bool) -> Result<bool> {
        if self.is_fresh(stage) {
            self.log(stage, "cached");
            return Ok(false);
        }
        for up in stage.upstream() {
            if cascade {
                self.ensure(up, true)?;
            } else {
                self.require(up)?;
            }
        }
        let dir = self.dir(stage);
        let stamp = dir.join("stamp.json");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        if stamp.exists() {
            fs::remove_file(&stamp).map_err(|e| CliError::io(&stamp, e))?;
        }
        let started = Instant::now();
        match stage {
            Stage::Pca => self.run_pca(&dir)?,
            Stage::Patches => self.run_patches(&dir)?,
            Stage::Split => self.run_split(&dir)?,
            Stage::Vae => self.run_vae(&dir)?,
            Stage::Aae => self.run_aae(&dir)?,
            Stage::Contrast => self.run_contrast(&dir)?,
            Stage::Extract(s) => self.run_extract(&dir, s)?,
            Stage::Classify(s) => self.run_classify(&dir, s)?,
            Stage::Evaluate(s) => self.run_evaluate(&dir, s)?,
        }
        write_json(
            &stamp,
            &Stamp {
                stage: stage.dir_name(),
                key: self.keys[&stage].clone(),
            },
        )?;
        self.log(stage, format_args!("done in {:.1?}", started.elapsed()));
        Ok(true)
    }

    /// Full pipeline for the configured feature source.
    pub fn run_all(&self) -> Result<MetricsReport> {
        let source = self.cfg.ablation.feature_source;
        self.run_source(source)
    }

    /// Full pipeline ending in the metrics of `source`.
    pub fn run_source(&self, source: FeatureSource) -> Result<MetricsReport> {
        self.ensure(Stage::Evaluate(source), true)?;
        self.metrics(source)
    }

    pub fn metrics(&self, source: FeatureSource) -> Result<MetricsReport> {
        self.require(Stage::Evaluate(source))?;
        read_json(&self.dir(Stage::Evaluate(source)).join("metrics.json"))
    }

    pub fn features_path(&self, source: FeatureSource) -> PathBuf {
        self.dir(Stage::Extract(source)).join("features.f32")
    }

    pub fn metrics_path(&self, source: FeatureSource) -> PathBuf {
        self.dir(Stage::Evaluate(source)).join("metrics.json")
    }

    fn load_source(&self) -> Result<(HyperCube, GroundTruth)> {
        match &self.cfg.data {
            DataSource::Files { cube, ground_truth } => Ok((
                load_cube(cube).stage("pca")?,
                load_ground_truth(ground_truth).stage("pca")?,
            )),
            DataSource::Synthetic(spec) => {
                let scene = generate(spec).stage("pca")?;
                Ok((scene.cube, scene.ground_truth))
            }
        }
    }

    fn run_pca(&self, dir: &Path) -> Result<()> {
        let (cube, gt) = self.load_source()?;
        let model = fit_pca_with(&cube, self.cfg.pca.components, self.cfg.pca.unit_variance).stage("pca")?;
        let reduced = apply_pca(&cube, &model).stage("pca")?;
        write_json(&dir.join("pca.json"), &model)?;
        write_json(
            &dir.join("reduced.json"),
            &ImageShape {
                height: reduced.height,
                width: reduced.width,
                channels: reduced.channels,
            },
        )?;
        let flat = Tensor::new(vec![reduced.pixels(), reduced.channels], reduced.data).stage("pca")?;
        write_matrix(&dir.join("reduced.f64"), &flat, Precision::F64)?;
        write_ground_truth(&dir.join("labels.u16"), &gt).stage("pca")?;
        self.log(
            Stage::Pca,
            format_args!("{} bands -> {}", cube.channels, model.k()),
        );
        Ok(())
    }

    fn load_reduced(&self) -> Result<(HyperCube, GroundTruth)> {
        let dir = self.dir(Stage::Pca);
        let shape: ImageShape = read_json(&dir.join("reduced.json"))?;
        let flat = read_matrix(&dir.join("reduced.f64"), Precision::F64)?;
        let cube = HyperCube::new(shape.height, shape.width, shape.channels, flat.into_data()).stage("pca")?;
        let gt = load_ground_truth(&dir.join("labels.u16")).stage("pca")?;
        Ok((cube, gt))
    }

    fn run_patches(&self, dir: &Path) -> Result<()> {
        let (cube, gt) = self.load_reduced()?;
        let patches = extract_patches(&cube, &gt, self.cfg.patch_size).stage("patches")?;
        if patches.is_empty() {
            return Err(CliError::Stage {
                stage: "patches",
                source: crossview_core::Error::Data("ground truth has no labeled pixels".into()),
            });
        }
        write_json(
            &dir.join("patches.json"),
            &PatchSummary {
                count: patches.len(),
                patch_size: patches.patch_size,
                channels: patches.channels,
                num_classes: patches.num_classes,
                labels: patches.labels.clone(),
                coords: patches.coords.clone(),
            },
        )?;
        self.log(Stage::Patches, format_args!("{} patches", patches.len()));
        Ok(())
    }

    pub fn patch_summary(&self) -> Result<PatchSummary> {
        read_json(&self.dir(Stage::Patches).join("patches.json"))
    }

    fn load_patches(&self) -> Result<PatchSet> {
        let summary = self.patch_summary()?;
        let (cube, gt) = self.load_reduced()?;
        let patches = extract_patches(&cube, &gt, summary.patch_size).stage("patches")?;
        if patches.labels != summary.labels || patches.coords != summary.coords {
            return Err(CliError::Missing {
                stage: "patches",
                artifact: "patches",
                reason: "patch list disagrees with the reduced cube".into(),
            });
        }
        Ok(patches)
    }

    fn run_split(&self, dir: &Path) -> Result<()> {
        let split = ChannelSplit::build(self.cfg.split.strategy, self.cfg.pca.components, self.cfg.split.seed)
            .stage("describe-split")?;
        write_json(&dir.join("split.json"), &split)
    }

    pub fn channel_split(&self) -> Result<ChannelSplit> {
        self.require(Stage::Split)?;
        read_json(&self.dir(Stage::Split).join("split.json"))
    }

    fn run_vae(&self, dir: &Path) -> Result<()> {
        let cfg = &self.cfg.vae;
        let patches = self.load_patches()?;
        let split = self.channel_split()?;
        let target = if cfg.self_reconstruction { &split.indices1 } else { &split.indices2 };
        let mut model = Vae::new(
            cfg.backbone.clone(),
            patches.patch_size,
            split.indices1.len(),
            target.len(),
            cfg.seed,
        )
        .stage("train-vae")?;
        self.log(Stage::Vae, format_args!("{} parameters", model.num_values()));
        let history = vae::train_vae(&mut model, &patches, &split, cfg).stage("train-vae")?;
        history.write_csv(&dir.join("history.csv")).stage("train-vae")?;
        model.save(&dir.join("vae.params"), cfg.seed).stage("train-vae")?;
        let codes = vae::encode_patches(&model, &patches, &split.indices1).stage("train-vae")?;
        write_matrix(&dir.join("codes.f64"), &codes, Precision::F64)?;
        if let Some(last) = history.column("total").and_then(|c| c.last().copied()) {
            self.log(Stage::Vae, format_args!("final total loss {last:.5}"));
        }
        Ok(())
    }

    fn run_aae(&self, dir: &Path) -> Result<()> {
        let cfg = &self.cfg.aae;
        let patches = self.load_patches()?;
        let split = self.channel_split()?;
        let target = if cfg.self_reconstruction { &split.indices2 } else { &split.indices1 };
        let mut model = Aae::new(
            cfg.backbone.clone(),
            &cfg.critic_hidden,
            patches.patch_size,
            split.indices2.len(),
            target.len(),
            cfg.seed,
        )
        .stage("train-aae")?;
        self.log(Stage::Aae, format_args!("{} parameters", model.num_values()));
        let history = aae::train_aae(&mut model, &patches, &split, cfg).stage("train-aae")?;
        history.write_csv(&dir.join("history.csv")).stage("train-aae")?;
        model.save(&dir.join("aae.params"), cfg.seed).stage("train-aae")?;
        let codes = aae::encode_patches(&model, &patches, &split.indices2).stage("train-aae")?;
        write_matrix(&dir.join("codes.f64"), &codes, Precision::F64)?;
        if let Some(last) = history.column("mse").and_then(|c| c.last().copied()) {
            self.log(Stage::Aae, format_args!("final mse {last:.5}"));
        }
        Ok(())
    }

    fn codes(&self, stage: Stage) -> Result<Tensor> {
        read_matrix(&self.dir(stage).join("codes.f64"), Precision::F64)
    }

    /// Test-set OA of a classifier trained on `features` with the configured
    /// sampling.
    fn score(&self, features: &Tensor, labels: &[usize], num_classes: usize) -> Result<f64> {
        let (_, predictions) = self.fit_classifier(features, labels, "train-contrast")?;
        let report = compute_metrics(&predictions.predicted, &predictions.actual, num_classes)
            .stage("train-contrast")?;
        Ok(report.oa)
    }

    fn run_contrast(&self, dir: &Path) -> Result<()> {
        let cfg = &self.cfg.contrast;
        let v = self.codes(Stage::Vae)?;
        let a = self.codes(Stage::Aae)?;
        let mut nets = ContrastNets::new(v.row_len(), cfg.net.clone(), cfg.seed).stage("train-contrast")?;
        let outcome = train_contrast(&mut nets, &v, &a, cfg).stage("train-contrast")?;
        outcome.history.write_csv(&dir.join("history.csv")).stage("train-contrast")?;
        let mut scores = Vec::new();
        let epoch = match cfg.selection {
            SnapshotSelection::Final => cfg.epochs,
            SnapshotSelection::Epoch(e) => e,
            SnapshotSelection::Best => {
                let summary = self.patch_summary()?;
                let mut encoder = nets.online_encoder.clone();
                for snap in &outcome.snapshots {
                    encoder.load_flat(snap).stage("train-contrast")?;
                    let f = contrast_features(&encoder, &v, &a)?;
                    scores.push(self.score(&f, &summary.labels, summary.num_classes)?);
                }
                // First epoch reaching the top score.
                let best = scores
                    .iter()
                    .enumerate()
                    .fold(None::<(usize, f64)>, |acc, (i, &s)| match acc {
                        Some((_, top)) if top >= s => acc,
                        _ => Some((i, s)),
                    });
                best.map_or(0, |(i, _)| i + 1)
            }
        };
        if epoch > 0 && epoch <= outcome.snapshots.len() {
            nets.online_encoder
                .load_flat(&outcome.snapshots[epoch - 1])
                .stage("train-contrast")?;
        }
        nets.save(&dir.join("contrast.params"), cfg.seed).stage("train-contrast")?;
        write_json(
            &dir.join("selection.json"),
            &Selection {
                selection: cfg.selection,
                epoch,
                scores,
            },
        )?;
        if let Some(last) = outcome.history.column("total").and_then(|c| c.last().copied()) {
            self.log(Stage::Contrast, format_args!("final total loss {last:.5}, kept epoch {epoch}"));
        }
        Ok(())
    }

    fn run_extract(&self, dir: &Path, source: FeatureSource) -> Result<()> {
        let features = match source {
            FeatureSource::Vae => self.codes(Stage::Vae)?,
            FeatureSource::Aae => self.codes(Stage::Aae)?,
            FeatureSource::Contrast => {
                let nets = ContrastNets::load(&self.dir(Stage::Contrast).join("contrast.params"))
                    .stage("extract")?;
                contrast_features(&nets.online_encoder, &self.codes(Stage::Vae)?, &self.codes(Stage::Aae)?)?
            }
        };
        write_matrix(&dir.join("features.f32"), &features, Precision::F32)
    }

    fn fit_classifier(
        &self,
        features: &Tensor,
        labels: &[usize],
        stage: &'static str,
    ) -> Result<(SvmModel, Predictions)> {
        if features.batch() != labels.len() {
            return Err(CliError::Stage {
                stage,
                source: crossview_core::Error::Argument(format!(
                    "{} feature rows for {} labeled patches",
                    features.batch(),
                    labels.len()
                )),
            });
        }
        let split = stratified_split(labels, self.cfg.train_fraction, self.cfg.sample_seed).stage(stage)?;
        let model = train_svm(features, labels, &split, &self.cfg.svm).stage(stage)?;
        let test = features.select_rows(&split.test_indices);
        let predicted = classify(&model, &test).stage(stage)?;
        let actual = split.test_indices.iter().map(|&i| labels[i]).collect();
        Ok((
            model,
            Predictions {
                train_indices: split.train_indices,
                test_indices: split.test_indices,
                predicted,
                actual,
            },
        ))
    }

    fn run_classify(&self, dir: &Path, source: FeatureSource) -> Result<()> {
        let features = read_matrix(&self.features_path(source), Precision::F32)?;
        let summary = self.patch_summary()?;
        let (model, predictions) = self.fit_classifier(&features, &summary.labels, "classify")?;
        write_json(&dir.join("svm.json"), &model)?;
        write_json(&dir.join("predictions.json"), &predictions)
    }

    fn run_evaluate(&self, dir: &Path, source: FeatureSource) -> Result<()> {
        let predictions: Predictions = read_json(&self.dir(Stage::Classify(source)).join("predictions.json"))?;
        let summary = self.patch_summary()?;
        let report = compute_metrics(&predictions.predicted, &predictions.actual, summary.num_classes)
            .stage("evaluate")?;
        report
            .write(&dir.join("metrics.json"), &dir.join("metrics.csv"))
            .stage("evaluate")?;
        self.log(
            Stage::Evaluate(source),
            format_args!("OA {:.2} AA {:.2}", report.oa, report.aa),
        );
        Ok(())
    }
}
