//! Mini-batch training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::loss::{logit_loss_grad, loss, LossKind, DEFAULT_DICE_SMOOTH};
use super::model::{batch_tensor, SegModel};
use super::optim::{Optimizer, OptimizerKind};
use super::{binarize, seg_metrics, EpochRecord, Result, SegMetrics, UnetError};
use crate::image::{Image, Mask};

/// A preprocessed image and its ground-truth mask (possibly blank).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image<f32>,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Augmented copies per training pair.
    pub augment_factor: usize,
    pub augment: AugmentConfig,
    /// Probability above which a validation pixel counts as foreground.
    pub threshold: f32,
    pub dice_smooth: f64,
    /// Seeds augmentation, batch order and dropout.
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            loss: LossKind::LogDice,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 20,
            augment_factor: 0,
            augment: AugmentConfig::default(),
            threshold: 0.5,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UnetError::InvalidHyper(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.dice_smooth >= 0.0) {
            return bad("dice_smooth must be non-negative");
        }
        Ok(())
    }
}

fn check_shapes(model: &SegModel, set: &[Sample]) -> Result<()> {
    let n = model.config.input_size;
    for (i, s) in set.iter().enumerate() {
        if s.image.shape() != (n, n) || s.mask.shape() != (n, n) {
            return Err(UnetError::ShapeMismatch(format!(
                "sample {i}: image {:?}, mask {:?}, model expects {n}x{n}",
                s.image.shape(),
                s.mask.shape()
            )));
        }
    }
    Ok(())
}

/// Trains for `hyper.epochs` epochs. See [`train_with`].
pub fn train(
    model: SegModel,
    train_set: &[Sample],
    val_set: &[Sample],
    hyper: &TrainHyper,
) -> Result<(SegModel, Vec<EpochRecord>)> {
    train_with(model, train_set, val_set, hyper, |_| true)
}

/// Trains, calling `on_epoch` after every epoch; returning `false` stops early.
///
/// The returned history is also appended to the model's training log.
pub fn train_with(
    mut model: SegModel,
    train_set: &[Sample],
    val_set: &[Sample],
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<(SegModel, Vec<EpochRecord>)> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(UnetError::EmptyTrainingSet);
    }
    check_shapes(&model, train_set)?;
    check_shapes(&model, val_set)?;
    let expanded;
    let train_set = if hyper.augment_factor > 0 {
        expanded = augment(train_set, &hyper.augment, hyper.augment_factor, hyper.seed);
        &expanded[..]
    } else {
        train_set
    };

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    model.visit_params(|p| p.zero_grad());

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
            let images: Vec<Image<f32>> = idx.iter().map(|&i| train_set[i].image.clone()).collect();
            let targets: Vec<f32> = idx
                .iter()
                .flat_map(|&i| train_set[i].mask.data().iter().map(|&v| f32::from(v != 0)))
                .collect();
            let x = batch_tensor(&images);
            let (logits, trace) = model.forward_train(&x, &mut rng);
            let (value, grad) =
                logit_loss_grad(hyper.loss, &targets, &logits.data, hyper.dice_smooth);
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(UnetError::DivergedLoss { epoch, batch: b });
            }
            let mut dlogits = logits;
            dlogits.data = grad;
            model.backward(&trace, dlogits);
            opt.apply(&mut model);
            total += value;
            batches += 1;
        }
        let (val_loss, val) = validate(&model, val_set, hyper)?;
        let record = EpochRecord {
            epoch,
            loss: total / batches as f64,
            val_loss,
            val,
        };
        model.training_log.push(record.clone());
        history.push(record);
        if !on_epoch(history.last().unwrap()) {
            break;
        }
    }
    Ok((model, history))
}

/// Validation loss over the whole set and per-image mean metrics.
fn validate(
    model: &SegModel,
    val_set: &[Sample],
    hyper: &TrainHyper,
) -> Result<(Option<f64>, Option<SegMetrics>)> {
    if val_set.is_empty() {
        return Ok((None, None));
    }
    let images: Vec<Image<f32>> = val_set.iter().map(|s| s.image.clone()).collect();
    let probs = model.predict(&images)?;
    let t: Vec<f64> = val_set
        .iter()
        .flat_map(|s| s.mask.data().iter().map(|&v| f64::from(v != 0)))
        .collect();
    let p: Vec<f64> = probs
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f64))
        .collect();
    let value = loss(hyper.loss, &t, &p, hyper.dice_smooth)?;
    let metrics = probs
        .iter()
        .zip(val_set)
        .map(|(prob, s)| seg_metrics(&s.mask, &binarize(prob, hyper.threshold)))
        .collect::<Result<Vec<_>>>()?;
    Ok((Some(value), SegMetrics::mean(&metrics)))
}

/// Writes `epoch,loss,val_dsc,val_jsc,val_precision,val_recall,val_f1`.
/// Missing validation metrics are left empty.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "loss",
        "val_dsc",
        "val_jsc",
        "val_precision",
        "val_recall",
        "val_f1",
    ])?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.loss.to_string()];
        match &r.val {
            Some(m) => {
                row.extend([m.dsc, m.jsc, m.precision, m.recall, m.f1].map(|v| v.to_string()))
            }
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_model, ConvLayers, UNetConfig};

    fn cfg() -> UNetConfig {
        UNetConfig {
            input_size: 16,
            base_filters: 2,
            conv_layers: ConvLayers::L18,
            dropout_rate: 0.0,
            batch_norm: false,
            seed: 1,
        }
    }

    fn toy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mask = Image::from_fn(16, 16, |r, c| {
                    let (y, x) = (r as f64 - 7.5 - (i % 3) as f64, c as f64 - 7.5);
                    u8::from(x * x + y * y < 16.0)
                });
                Sample {
                    image: mask.map(|v| v as f32 * 0.7 + 0.1),
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_gives_one_record() {
        let m = build_model(&cfg()).unwrap();
        let hyper = TrainHyper {
            epochs: 1,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (m, hist) = train(m, &toy(4), &toy(2), &hyper).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(m.training_log, hist);
        assert!(hist[0].val.is_some() && hist[0].val_loss.is_some());
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let m = build_model(&cfg()).unwrap();
        let before: Vec<Vec<f32>> = m
            .named_arrays()
            .into_iter()
            .map(|(_, _, v)| v.to_vec())
            .collect();
        let hyper = TrainHyper {
            epochs: 3,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (m, hist) = train(m, &toy(4), &toy(2), &hyper).unwrap();
        let after: Vec<Vec<f32>> = m
            .named_arrays()
            .into_iter()
            .map(|(_, _, v)| v.to_vec())
            .collect();
        assert_eq!(before, after);
        assert!(hist.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
        // Whole-set batches make the training loss order-independent up to rounding.
        let hyper = TrainHyper {
            batch_size: 4,
            ..hyper
        };
        let (_, hist) = train(m, &toy(4), &[], &hyper).unwrap();
        assert!(hist
            .windows(2)
            .all(|w| (w[0].loss - w[1].loss).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(&cfg()).unwrap();
        assert!(matches!(
            train(m.clone(), &[], &[], &TrainHyper::default()),
            Err(UnetError::EmptyTrainingSet)
        ));
        let wrong = vec![Sample {
            image: Image::filled(8, 8, 0.0),
            mask: Image::filled(8, 8, 0),
        }];
        assert!(matches!(
            train(m.clone(), &wrong, &[], &TrainHyper::default()),
            Err(UnetError::ShapeMismatch(_))
        ));
        let hyper = TrainHyper {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(m, &toy(2), &[], &hyper),
            Err(UnetError::InvalidHyper(_))
        ));
    }

    #[test]
    fn history_csv_layout() {
        let hist = vec![
            EpochRecord {
                epoch: 1,
                loss: 0.5,
                val_loss: None,
                val: None,
            },
            EpochRecord {
                epoch: 2,
                loss: 0.25,
                val_loss: Some(0.3),
                val: Some(SegMetrics::PERFECT),
            },
        ];
        let mut buf = Vec::new();
        write_history_csv(&hist, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,loss,val_dsc,val_jsc,val_precision,val_recall,val_f1"
        );
        assert_eq!(lines[1], "1,0.5,,,,,");
        assert_eq!(lines[2], "2,0.25,1,1,1,1,1");
    }
}
