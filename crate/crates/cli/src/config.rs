//! Run configuration: one JSON document drives every stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crossview_core::aae::AaeConfig;
use crossview_core::backbone::BackboneConfig;
use crossview_core::channelsplit::SplitStrategy;
use crossview_core::contrast::{ContrastConfig, PairingMode};
use crossview_core::evaluate::SvmConfig;
use crossview_core::synthetic::SyntheticSpec;
use crossview_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Where the raw cube and its labels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Containers produced by `convert`.
    Files { cube: PathBuf, ground_truth: PathBuf },
    /// A generated scene; its `seed` acts as an offset to the master seed.
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSettings {
    pub components: usize,
    /// Scale every band to unit variance before fitting.
    pub unit_variance: bool,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self {
            components: 30,
            unit_variance: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub strategy: SplitStrategy,
    /// Offset mixed into the master seed (random strategy only).
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            strategy: SplitStrategy::Parity,
            seed: 0,
        }
    }
}

/// Features handed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Vae,
    Aae,
    /// Contrast-encoder outputs of both codes, concatenated.
    Contrast,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 3] = [FeatureSource::Vae, FeatureSource::Aae, FeatureSource::Contrast];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Vae => "vae",
            FeatureSource::Aae => "aae",
            FeatureSource::Contrast => "contrast",
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FeatureSource::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown feature source {s:?} (vae, aae, contrast)"))
    }
}

/// Switches for the ablation runs. These override the matching fields of
/// the per-stage blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub self_reconstruction: bool,
    pub feature_source: FeatureSource,
    pub pairing: PairingMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            self_reconstruction: false,
            feature_source: FeatureSource::Contrast,
            pairing: PairingMode::CrossView,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub pca: PcaSettings,
    /// Odd side of the square patches.
    pub patch_size: usize,
    pub split: SplitSettings,
    pub vae: VaeConfig,
    pub aae: AaeConfig,
    pub contrast: ContrastConfig,
    pub svm: SvmConfig,
    /// Per-class share of labeled pixels used to train the classifier.
    pub train_fraction: f64,
    /// Offset for the train/test draw.
    pub sample_seed: u64,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub output: PathBuf,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Files {
                cube: PathBuf::from("data/cube.f32"),
                ground_truth: PathBuf::from("data/labels.u16"),
            },
            pca: PcaSettings::default(),
            patch_size: 27,
            split: SplitSettings::default(),
            vae: VaeConfig::default(),
            aae: AaeConfig::default(),
            contrast: ContrastConfig::default(),
            svm: SvmConfig::default(),
            train_fraction: 0.10,
            sample_seed: 0,
            seed: 0,
            output: PathBuf::from("runs/crossview"),
            ablation: Ablation::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["ip", "pu", "sa", "smoke"];

impl RunConfig {
    /// Named starting points: `ip`, `pu` and `sa` expect converted
    /// containers under `data/<name>/`; `smoke` runs on a generated scene.
    pub fn preset(name: &str) -> Result<Self> {
        let files = |dir: &str, fraction: f64| RunConfig {
            data: DataSource::Files {
                cube: PathBuf::from(format!("data/{dir}/cube.f32")),
                ground_truth: PathBuf::from(format!("data/{dir}/labels.u16")),
            },
            train_fraction: fraction,
            output: PathBuf::from(format!("runs/{dir}")),
            ..RunConfig::default()
        };
        match name {
            "ip" => Ok(files("ip", 0.10)),
            "pu" => Ok(files("pu", 0.10)),
            "sa" => Ok(files("sa", 0.05)),
            "smoke" => Ok(RunConfig::smoke()),
            _ => Err(CliError::Config(format!(
                "unknown preset {name:?} (one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Desk-scale run on a 32x32x30 synthetic scene with four classes,
    /// reflectance in percent.
    pub fn smoke() -> Self {
        let backbone = BackboneConfig {
            latent: 32,
            ..BackboneConfig::default()
        };
        RunConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                amplitude: 100.0,
                ..SyntheticSpec::default()
            }),
            pca: PcaSettings {
                components: 30,
                unit_variance: false,
            },
            patch_size: 9,
            vae: VaeConfig {
                backbone: backbone.clone(),
                epochs: 10,
                batch_size: 16,
                ..VaeConfig::default()
            },
            aae: AaeConfig {
                backbone,
                epochs: 10,
                batch_size: 16,
                ..AaeConfig::default()
            },
            contrast: ContrastConfig {
                epochs: 30,
                ..ContrastConfig::default()
            },
            output: PathBuf::from("runs/smoke"),
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copy with ablation switches pushed into the stage blocks and every
    /// stage seed derived from the master seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.vae.self_reconstruction = c.ablation.self_reconstruction;
        c.aae.self_reconstruction = c.ablation.self_reconstruction;
        c.contrast.pairing = c.ablation.pairing;
        c.vae.seed = stage_seed(c.seed, "vae", self.vae.seed);
        c.aae.seed = stage_seed(c.seed, "aae", self.aae.seed);
        c.contrast.seed = stage_seed(c.seed, "contrast", self.contrast.seed);
        c.svm.seed = stage_seed(c.seed, "svm", self.svm.seed);
        c.split.seed = stage_seed(c.seed, "split", self.split.seed);
        c.sample_seed = stage_seed(c.seed, "sample", self.sample_seed);
        if let DataSource::Synthetic(spec) = &mut c.data {
            spec.seed = stage_seed(c.seed, "synthetic", spec.seed);
        }
        c
    }

    /// Checks that do not need the data: ranges and path existence.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.pca.components == 0 {
            return bad("pca.components must be at least 1".into());
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad(format!("patch_size {} must be odd", self.patch_size));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1]", self.train_fraction));
        }
        for (name, batch) in [
            ("vae", self.vae.batch_size),
            ("aae", self.aae.batch_size),
            ("contrast", self.contrast.batch_size),
        ] {
            if batch == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        if self.vae.backbone.latent != self.aae.backbone.latent {
            return bad(format!(
                "vae and aae latent sizes differ ({} vs {}); the contrast stage pairs their codes",
                self.vae.backbone.latent, self.aae.backbone.latent
            ));
        }
        if !(self.svm.reg > 0.0) {
            return bad(format!("svm.reg {} must be positive", self.svm.reg));
        }
        self.contrast
            .validate()
            .map_err(|e| CliError::Config(format!("contrast: {e}")))?;
        if let DataSource::Files { cube, ground_truth } = &self.data {
            for p in [cube, ground_truth] {
                if !p.exists() {
                    return bad(format!("data file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

/// Seed for one stage: the first eight bytes, read little-endian, of
/// `SHA-256("crossview-seed" || master as u64 LE || stage name || offset as u64 LE)`.
pub fn stage_seed(master: u64, stage: &str, offset: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"crossview-seed");
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(offset.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"patchsize": 9}"#),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn preset_fractions() {
        let f = |n| RunConfig::preset(n).unwrap().train_fraction;
        assert_eq!((f("ip"), f("pu"), f("sa")), (0.10, 0.10, 0.05));
        assert!(RunConfig::preset("xx").is_err());
    }

    #[test]
    fn stage_seeds_are_independent() {
        let a = RunConfig::smoke();
        let mut b = a.clone();
        b.vae.seed = 5;
        let (ra, rb) = (a.resolved(), b.resolved());
        assert_ne!(ra.vae.seed, rb.vae.seed);
        assert_eq!(ra.aae.seed, rb.aae.seed);
        assert_eq!(ra.contrast.seed, rb.contrast.seed);
        assert_eq!(ra.data, rb.data);
        assert_ne!(stage_seed(0, "vae", 0), stage_seed(0, "aae", 0));
        assert_ne!(stage_seed(0, "vae", 0), stage_seed(1, "vae", 0));
    }

    #[test]
    fn ablation_overrides_stage_blocks() {
        let mut c = RunConfig::smoke();
        c.ablation.self_reconstruction = true;
        c.ablation.pairing = PairingMode::SameView;
        let r = c.resolved();
        assert!(r.vae.self_reconstruction && r.aae.self_reconstruction);
        assert_eq!(r.contrast.pairing, PairingMode::SameView);
    }

    #[test]
    fn validation_catches_ranges() {
        let mut c = RunConfig::smoke();
        assert!(c.validate().is_ok());
        c.patch_size = 8;
        assert!(c.validate().is_err());
        let mut c = RunConfig::smoke();
        c.train_fraction = 0.0;
        assert!(c.validate().is_err());
        let c = RunConfig::default();
        assert!(c.validate().is_err(), "default data files do not exist here");
    }
}
