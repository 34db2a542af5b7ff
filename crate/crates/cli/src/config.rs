//! Experiment configuration: one TOML document, every section optional.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lvseg::eval::EfBands;
use lvseg::imgproc::PreprocessRecipe;
use lvseg::postproc::{Connectivity, FilterMethod, DEFAULT_CENTER_FRACTION};
use lvseg::roi::RoiParams;
use lvseg::unet::{TrainHyper, UNetConfig};
use lvseg::volume::{EnsembleMode, IntegrationMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Invalid;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds weight init, the patient split, shuffling and augmentation.
    pub seed: u64,
    /// Worker threads for per-patient stages; 0 means one per CPU.
    pub jobs: usize,
    /// Parent of the per-run output directories.
    pub runs_dir: Option<PathBuf>,
    pub ingest: IngestConfig,
    pub roi: RoiConfig,
    pub preprocess: PreprocessRecipe,
    pub model: UNetConfig,
    pub train: TrainHyper,
    pub segment: SegmentConfig,
    pub postproc: PostprocConfig,
    pub volume: VolumeConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Label value of the LV cavity in NIfTI label volumes.
    pub lv_class: u16,
    /// `<stem><suffix>.nii` holds the labels for `<stem>.nii`.
    pub label_suffix: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            lv_class: 3,
            label_suffix: "_gt".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    /// Crop each study to its detected ROI before preprocessing.
    pub crop: bool,
    #[serde(flatten)]
    pub params: RoiParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub threshold: f32,
    /// How several weight files are combined.
    pub ensemble: EnsembleMode,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            threshold: 0.5,
            ensemble: EnsembleMode::Majority,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub method: FilterMethod,
    pub connectivity: Connectivity,
    pub center_fraction: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            method: FilterMethod::default(),
            connectivity: Connectivity::default(),
            center_fraction: DEFAULT_CENTER_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub mode: IntegrationMode,
    /// Replace implausible volumes with the age/sex population model.
    pub fallback: bool,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            mode: IntegrationMode::default(),
            fallback: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Interior EF cut points between classes.
    pub ef_cuts: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ef_cuts: vec![0.4, 0.5],
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| Invalid(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    /// Applies command-line overrides, pushes the global seed into the model
    /// and training sections and checks every section.
    pub fn resolve(mut self, seed: Option<u64>, jobs: Option<usize>) -> anyhow::Result<Config> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(jobs) = jobs {
            self.jobs = jobs;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.preprocess
            .validate()
            .map_err(|e| Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| Invalid(e.to_string()))?;
        self.bands()?;
        if !(0.0..=1.0).contains(&self.postproc.center_fraction) {
            return Err(Invalid("postproc.center_fraction must lie in [0, 1]".into()).into());
        }
        Ok(self)
    }

    pub fn bands(&self) -> anyhow::Result<EfBands> {
        EfBands::from_cuts(&self.eval.ef_cuts).map_err(|e| Invalid(e.to_string()).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}
