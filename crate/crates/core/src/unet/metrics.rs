//! Overlap metrics between binary masks.

use serde::{Deserialize, Serialize};

use super::{Result, UnetError};
use crate::image::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub jsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SegMetrics {
    pub const PERFECT: SegMetrics = SegMetrics {
        dsc: 1.0,
        jsc: 1.0,
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    /// Element-wise mean of a set of metrics; `None` when empty.
    pub fn mean(all: &[SegMetrics]) -> Option<SegMetrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&SegMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(SegMetrics {
            dsc: avg(|m| m.dsc),
            jsc: avg(|m| m.jsc),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice, Jaccard, precision, recall and F1 of `pred` against `truth`.
///
/// Two empty masks score 1 everywhere; when only one is empty every
/// metric is 0. Any non-zero pixel counts as foreground.
pub fn seg_metrics(truth: &Mask, pred: &Mask) -> Result<SegMetrics> {
    if truth.shape() != pred.shape() {
        return Err(UnetError::ShapeMismatch(format!(
            "truth is {:?}, prediction is {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let (mut t, mut p, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in truth.data().iter().zip(pred.data()) {
        let (a, b) = (a != 0, b != 0);
        t += a as usize;
        p += b as usize;
        both += (a && b) as usize;
    }
    if t == 0 && p == 0 {
        return Ok(SegMetrics::PERFECT);
    }
    let dsc = ratio(2 * both, t + p);
    Ok(SegMetrics {
        dsc,
        jsc: ratio(both, t + p - both),
        precision: ratio(both, p),
        recall: ratio(both, t),
        // Harmonic mean of precision and recall reduces to the Dice ratio.
        f1: dsc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn mask(bits: &[u8]) -> Mask {
        Image::from_vec(1, bits.len(), bits.to_vec())
    }

    #[test]
    fn hand_counted_case() {
        let t = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let p = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        let m = seg_metrics(&t, &p).unwrap();
        assert_eq!(m.dsc, 0.5);
        assert!((m.jsc - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
        let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        assert!((m.f1 - hm).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let z = mask(&[0, 0, 0]);
        let one = mask(&[0, 1, 0]);
        assert_eq!(seg_metrics(&z, &z).unwrap(), SegMetrics::PERFECT);
        for (a, b) in [(&z, &one), (&one, &z)] {
            let m = seg_metrics(a, b).unwrap();
            assert_eq!([m.dsc, m.jsc, m.precision, m.recall, m.f1], [0.0; 5]);
        }
        assert_eq!(seg_metrics(&one, &one).unwrap(), SegMetrics::PERFECT);
        assert!(seg_metrics(&z, &mask(&[0, 0])).is_err());
    }

    #[test]
    fn disjoint_is_zero() {
        let m = seg_metrics(&mask(&[1, 1, 0, 0]), &mask(&[0, 0, 1, 1])).unwrap();
        assert_eq!([m.dsc, m.jsc, m.precision, m.recall, m.f1], [0.0; 5]);
    }
}
