//! U-Net segmentation: architecture, losses, metrics, augmentation, data
//! splits, training and weight files.
//!
//! The network is implemented directly on top of a small CPU tensor engine
//! (`im2col` + SGEMM), so it has no runtime dependencies beyond BLAS-like
//! matrix multiplication.

mod augment;
mod layers;
mod loss;
mod metrics;
mod model;
mod optim;
mod split;
mod tensor;
mod train;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};

pub use augment::{augment, AugmentConfig, Transform};
pub use loss::{loss, loss_grad, LossKind, DEFAULT_DICE_SMOOTH};
pub use metrics::{seg_metrics, SegMetrics};
pub use model::{build_model, LayerSummary, SegModel};
pub use optim::OptimizerKind;
pub use split::split_patients;
pub use train::{train, train_with, write_history_csv, Sample, TrainHyper};
pub use weights::{load_weights, load_weights_into, save_weights};

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 3 distinct patients to split, got {0}")]
    TooFewPatients(usize),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("weight file was written for a different configuration: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = UnetError> = std::result::Result<T, E>;

/// Number of convolution layers; fixes the number of pooling stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ConvLayers {
    L18,
    L23,
    L28,
}

impl ConvLayers {
    /// Number of 2x2 pooling stages.
    pub fn depth(self) -> usize {
        match self {
            ConvLayers::L18 => 3,
            ConvLayers::L23 => 4,
            ConvLayers::L28 => 5,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            ConvLayers::L18 => 18,
            ConvLayers::L23 => 23,
            ConvLayers::L28 => 28,
        }
    }
}

impl TryFrom<u32> for ConvLayers {
    type Error = String;

    fn try_from(n: u32) -> std::result::Result<Self, String> {
        match n {
            18 => Ok(ConvLayers::L18),
            23 => Ok(ConvLayers::L23),
            28 => Ok(ConvLayers::L28),
            other => Err(format!("conv_layers must be 18, 23 or 28, got {other}")),
        }
    }
}

impl From<ConvLayers> for u32 {
    fn from(c: ConvLayers) -> u32 {
        c.count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Side of the square input, in pixels.
    pub input_size: usize,
    /// Filters in the first convolution; doubles at each pooling stage.
    pub base_filters: usize,
    pub conv_layers: ConvLayers,
    /// Dropout before each upsampling; 0 disables it.
    pub dropout_rate: f32,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 176,
            base_filters: 64,
            conv_layers: ConvLayers::L23,
            dropout_rate: 0.5,
            batch_norm: false,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1usize << self.conv_layers.depth();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(UnetError::InvalidConfig(format!(
                "input_size {} must be a positive multiple of {stride} for {} layers",
                self.input_size,
                self.conv_layers.count()
            )));
        }
        if self.base_filters == 0 {
            return Err(UnetError::InvalidConfig(
                "base_filters must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(UnetError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Loss on the validation set, if there was one.
    pub val_loss: Option<f64>,
    pub val: Option<SegMetrics>,
}

/// 1 where `p > threshold`, else 0.
pub fn binarize(prob: &Image<f32>, threshold: f32) -> Mask {
    prob.map(|p| u8::from(p > threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        let m = binarize(&Image::filled(2, 2, 0.5), 0.5);
        assert_eq!(m.count_ones(), 0);
        let m = binarize(&Image::filled(2, 2, 0.9), 0.5);
        assert_eq!(m.count_ones(), 4);
    }

    #[test]
    fn conv_layers_serde() {
        let c: ConvLayers = serde_json::from_str("28").unwrap();
        assert_eq!(c, ConvLayers::L28);
        assert_eq!(serde_json::to_string(&ConvLayers::L18).unwrap(), "18");
        assert!(serde_json::from_str::<ConvLayers>("20").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = UNetConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.input_size = 100;
        assert!(matches!(cfg.validate(), Err(UnetError::InvalidConfig(_))));
        cfg.input_size = 176;
        cfg.conv_layers = ConvLayers::L28;
        assert!(cfg.validate().is_err());
        cfg.input_size = 192;
        assert!(cfg.validate().is_ok());
    }
}
