//! Volume and EF evaluation against reference values, and plot-ready exports.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("no items to evaluate")]
    Empty,
    #[error("invalid EF bands: {0}")]
    InvalidBands(String),
    #[error("class {class} out of range for {n_classes} classes")]
    OutOfRangeClass { class: usize, n_classes: usize },
    #[error("EF {0} is outside every band")]
    Unclassified(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Root mean squared error.
pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let sq: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Contiguous EF intervals covering `[0, 1]`, given by their interior cut
/// points. Bands are left-closed and right-open except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfBands {
    pub edges: Vec<(f64, f64)>,
}

impl Default for EfBands {
    /// Reduced, borderline and preserved EF.
    fn default() -> Self {
        EfBands {
            edges: vec![(0.0, 0.4), (0.4, 0.5), (0.5, 1.0)],
        }
    }
}

impl EfBands {
    pub fn from_cuts(cuts: &[f64]) -> Result<Self> {
        let mut pts = vec![0.0];
        pts.extend_from_slice(cuts);
        pts.push(1.0);
        let bands = EfBands {
            edges: pts.windows(2).map(|w| (w[0], w[1])).collect(),
        };
        bands.validate()?;
        Ok(bands)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.edges;
        if e.is_empty() {
            return Err(EvalError::InvalidBands("no bands".into()));
        }
        if e[0].0 != 0.0 || e[e.len() - 1].1 != 1.0 {
            return Err(EvalError::InvalidBands(
                "bands must start at 0 and end at 1".into(),
            ));
        }
        for (i, &(lo, hi)) in e.iter().enumerate() {
            if !(lo < hi) {
                return Err(EvalError::InvalidBands(format!(
                    "band {i} is empty: [{lo}, {hi})"
                )));
            }
            if i > 0 && e[i - 1].1 != lo {
                let kind = if e[i - 1].1 > lo {
                    "overlaps"
                } else {
                    "leaves a gap before"
                };
                return Err(EvalError::InvalidBands(format!(
                    "band {i} {kind} band {}",
                    i - 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub fn ef_class(ef: f64, bands: &EfBands) -> Result<usize> {
    bands.validate()?;
    let last = bands.len() - 1;
    bands
        .edges
        .iter()
        .position(|&(lo, hi)| ef >= lo && ef < hi)
        .or_else(|| (ef == bands.edges[last].1).then_some(last))
        .ok_or(EvalError::Unclassified(ef))
}

/// Counts indexed `[actual][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(EvalError::Empty),
            t => Ok(self.trace() as f64 / t as f64),
        }
    }
}

pub fn confusion(pred: &[usize], actual: &[usize], n_classes: usize) -> Result<Confusion> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch(pred.len(), actual.len()));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &a) in pred.iter().zip(actual) {
        for class in [p, a] {
            if class >= n_classes {
                return Err(EvalError::OutOfRangeClass { class, n_classes });
            }
        }
        counts[a][p] += 1;
    }
    Ok(Confusion { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub actual_esv: f64,
    pub actual_edv: f64,
    pub pred_esv: f64,
    pub pred_edv: f64,
    pub flags: String,
}

impl PatientRow {
    pub fn actual_ef(&self) -> f64 {
        (self.actual_edv - self.actual_esv) / self.actual_edv
    }

    pub fn pred_ef(&self) -> f64 {
        if self.pred_edv > 0.0 {
            (self.pred_edv - self.pred_esv) / self.pred_edv
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_patients: usize,
    pub esv_rmse_ml: Option<f64>,
    pub edv_rmse_ml: Option<f64>,
    pub ef_rmse_fraction: Option<f64>,
    pub bands: EfBands,
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by patient id.
    pub rows: Vec<PatientRow>,
    pub summary: Summary,
}

impl EvalReport {
    pub fn new(mut rows: Vec<PatientRow>, bands: &EfBands) -> Result<Self> {
        bands.validate()?;
        rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let col = |f: fn(&PatientRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let opt = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(EvalError::Empty) => Ok(None),
            Err(e) => Err(e),
        };
        let esv_rmse = opt(rmse(&col(|r| r.pred_esv), &col(|r| r.actual_esv)))?;
        let edv_rmse = opt(rmse(&col(|r| r.pred_edv), &col(|r| r.actual_edv)))?;
        let ef_rmse = opt(rmse(&col(PatientRow::pred_ef), &col(PatientRow::actual_ef)))?;
        let classify = |v: Vec<f64>| {
            v.into_iter()
                .map(|ef| ef_class(ef.clamp(0.0, 1.0), bands))
                .collect::<Result<Vec<_>>>()
        };
        let pred = classify(col(PatientRow::pred_ef))?;
        let actual = classify(col(PatientRow::actual_ef))?;
        let confusion = confusion(&pred, &actual, bands.len())?;
        let accuracy = opt(confusion.accuracy())?;
        Ok(EvalReport {
            summary: Summary {
                n_patients: rows.len(),
                esv_rmse_ml: esv_rmse,
                edv_rmse_ml: edv_rmse,
                ef_rmse_fraction: ef_rmse,
                bands: bands.clone(),
                confusion,
                accuracy,
            },
            rows,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| EvalError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `volumes.csv`, `summary.json`, `scatter_{esv,edv,ef}.csv` and
/// `residuals_{esv,edv,ef}.csv` into `dir`, overwriting earlier output.
/// Returns the paths written.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let rows = &report.rows;

    let path = dir.join("volumes.csv");
    write_csv(
        &path,
        &[
            "patient_id",
            "actual_esv_ml",
            "actual_edv_ml",
            "actual_ef",
            "pred_esv_ml",
            "pred_edv_ml",
            "pred_ef",
            "flags",
        ],
        rows.iter().map(|r| {
            vec![
                r.patient_id.clone(),
                r.actual_esv.to_string(),
                r.actual_edv.to_string(),
                r.actual_ef().to_string(),
                r.pred_esv.to_string(),
                r.pred_edv.to_string(),
                r.pred_ef().to_string(),
                r.flags.clone(),
            ]
        }),
    )?;
    written.push(path);

    let quantities: [(&str, fn(&PatientRow) -> (f64, f64)); 3] = [
        ("esv", |r| (r.actual_esv, r.pred_esv)),
        ("edv", |r| (r.actual_edv, r.pred_edv)),
        ("ef", |r| (r.actual_ef(), r.pred_ef())),
    ];
    for (name, get) in quantities {
        let path = dir.join(format!("scatter_{name}.csv"));
        write_csv(
            &path,
            &["patient_id", "actual", "predicted"],
            rows.iter().map(|r| {
                let (a, p) = get(r);
                vec![r.patient_id.clone(), a.to_string(), p.to_string()]
            }),
        )?;
        written.push(path);
        let path = dir.join(format!("residuals_{name}.csv"));
        write_csv(
            &path,
            &["patient_id", "actual", "residual"],
            rows.iter().map(|r| {
                let (a, p) = get(r);
                vec![r.patient_id.clone(), a.to_string(), (p - a).to_string()]
            }),
        )?;
        written.push(path);
    }

    let path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&report.summary).expect("summary serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}
