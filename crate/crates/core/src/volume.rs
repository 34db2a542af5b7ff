//! From per-image masks to ESV, EDV and ejection fraction.
//!
//! Each slice contributes its smallest (end-systolic) and largest
//! (end-diastolic) segmented area. The areas are stacked along the slice
//! normal and integrated between neighbouring slices.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};
use crate::ingest::{iop_is_unit, Sex};

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("mask is {rows}x{cols}; the fraction form needs a square mask")]
    NonSquareMask { rows: usize, cols: usize },
    #[error("orientation cosines are not unit vectors: {0:?}")]
    InvalidIop([f64; 6]),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("two slices share location {0} mm")]
    DuplicateLocation(f64),
    #[error("need at least 2 usable slices, got {0}")]
    TooFewSlices(usize),
    #[error("end-diastolic volume is not positive; ejection fraction undefined")]
    NonPositiveEdv,
    #[error("fallback needs a known sex")]
    UnknownSex,
    #[error("fallback needs a non-negative age, got {0:?}")]
    InvalidAge(Option<f64>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("nothing to combine")]
    Empty,
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFlag {
    FallbackFewSlices,
    FallbackLowEsv,
    FallbackLowEdv,
    EdgeTrimmed,
    ZeroSliceRemoved,
    RetakeDeduped,
}

impl fmt::Display for VolumeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VolumeFlag::FallbackFewSlices => "fallback_few_slices",
            VolumeFlag::FallbackLowEsv => "fallback_low_esv",
            VolumeFlag::FallbackLowEdv => "fallback_low_edv",
            VolumeFlag::EdgeTrimmed => "edge_trimmed",
            VolumeFlag::ZeroSliceRemoved => "zero_slice_removed",
            VolumeFlag::RetakeDeduped => "retake_deduped",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub esv_ml: f64,
    pub edv_ml: f64,
    /// `(edv - esv) / edv`; `None` when EDV is not positive.
    pub ef: Option<f64>,
    pub flags: BTreeSet<VolumeFlag>,
    /// Distinct slice locations that went into the estimate.
    pub n_slices: usize,
}

impl VolumeResult {
    pub fn new(esv_ml: f64, edv_ml: f64, n_slices: usize) -> Self {
        VolumeResult {
            esv_ml,
            edv_ml,
            ef: ejection_fraction(esv_ml, edv_ml),
            flags: BTreeSet::new(),
            n_slices,
        }
    }

    /// Flags joined with `;`, in a fixed order.
    pub fn flags_string(&self) -> String {
        self.flags
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn ejection_fraction(esv: f64, edv: f64) -> Option<f64> {
    (edv > 0.0).then(|| (edv - esv) / edv)
}

/// One spatial slice: its position along the stack normal and the segmented
/// area of every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: usize,
    pub location_mm: f64,
    pub areas: Vec<f64>,
    pub acquisition_index: u32,
}

/// Segmented area in mm²: pixel count times the squared pixel size.
pub fn slice_area(mask: &Mask, pixel_spacing_mm: f64) -> f64 {
    mask.count_ones() as f64 * pixel_spacing_mm * pixel_spacing_mm
}

/// Same area written as foreground fraction times the field of view.
pub fn slice_area_fraction(mask: &Mask, pixel_spacing_mm: f64) -> Result<f64> {
    let (rows, cols) = mask.shape();
    if rows != cols {
        return Err(VolumeError::NonSquareMask { rows, cols });
    }
    let f = mask.count_ones() as f64 / mask.len() as f64;
    Ok(f * (pixel_spacing_mm * rows as f64).powi(2))
}

/// Position of a slice along its normal, `ipp . (row x col)`.
pub fn slice_location(ipp: &[f64; 3], iop: &[f64; 6]) -> Result<f64> {
    if !iop_is_unit(iop) {
        return Err(VolumeError::InvalidIop(*iop));
    }
    let (u, v) = (&iop[..3], &iop[3..]);
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    Ok(ipp[0] * n[0] + ipp[1] * n[1] + ipp[2] * n[2])
}

/// `(argmin, argmax)` of the areas; ties go to the earliest frame and an
/// empty list gives `(0, 0)`.
pub fn select_es_ed_frames(areas: &[f64]) -> (usize, usize) {
    let (mut es, mut ed) = (0, 0);
    for (i, &a) in areas.iter().enumerate() {
        if a < areas[es] {
            es = i;
        }
        if a > areas[ed] {
            ed = i;
        }
    }
    (es, ed)
}

/// Tolerance below which two slice locations are the same position.
pub const RETAKE_TOLERANCE_MM: f64 = 1e-3;

/// Among slices at the same location keep only the latest acquisition
/// (the last one listed wins a tie). Survivors keep their input order; the
/// flag is true when anything was dropped.
pub fn dedupe_retakes(slices: Vec<SliceRecord>) -> (Vec<SliceRecord>, bool) {
    let mut order: Vec<usize> = (0..slices.len()).collect();
    order.sort_by(|&a, &b| {
        slices[a]
            .location_mm
            .total_cmp(&slices[b].location_mm)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; slices.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len()
            && (slices[order[j]].location_mm - slices[order[j - 1]].location_mm).abs()
                < RETAKE_TOLERANCE_MM
        {
            j += 1;
        }
        let best = order[i..j]
            .iter()
            .copied()
            .max_by(|&a, &b| {
                slices[a]
                    .acquisition_index
                    .cmp(&slices[b].acquisition_index)
                    .then(a.cmp(&b))
            })
            .unwrap();
        keep[best] = true;
        i = j;
    }
    let before = slices.len();
    let out: Vec<SliceRecord> = slices
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect();
    let removed = out.len() < before;
    (out, removed)
}

/// Drops a basal or apical slice that is larger than its neighbour.
///
/// `areas` are ordered by location. Each end is tested once against the
/// original list; with only two slices the first rule wins. Returns the
/// index range that survives.
pub fn trim_edges(areas: &[f64]) -> Result<std::ops::Range<usize>> {
    let n = areas.len();
    if n < 2 {
        return Err(VolumeError::TooFewSlices(n));
    }
    let mut start = 0;
    let mut end = n;
    if areas[0] > areas[1] {
        start = 1;
    }
    if areas[n - 1] > areas[n - 2] && end - start >= 2 {
        end = n - 1;
    }
    Ok(start..end)
}

/// Removes interior slices with zero area in every frame. `slices` must be
/// sorted by location; the end slices are always kept.
pub fn remove_zero_slices(slices: Vec<SliceRecord>) -> (Vec<SliceRecord>, bool) {
    let n = slices.len();
    let before = n;
    let out: Vec<SliceRecord> = slices
        .into_iter()
        .enumerate()
        .filter(|(i, s)| *i == 0 || *i + 1 == n || s.areas.iter().any(|&a| a > 0.0))
        .map(|(_, s)| s)
        .collect();
    let removed = out.len() < before;
    (out, removed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntegrationMode {
    /// Mean of neighbouring areas times their distance.
    #[default]
    #[serde(rename = "am")]
    ArithmeticMean,
    /// Frustum between neighbouring areas.
    #[serde(rename = "tc")]
    TruncatedCone,
}

impl std::str::FromStr for IntegrationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "am" => Ok(IntegrationMode::ArithmeticMean),
            "tc" => Ok(IntegrationMode::TruncatedCone),
            other => Err(format!(
                "unknown integration mode {other:?} (expected am or tc)"
            )),
        }
    }
}

/// Volume in mm³ of the stack of `areas` (mm²) at `locations` (mm).
///
/// Pairs are sorted by location first, so the input order does not matter.
pub fn integrate(areas: &[f64], locations: &[f64], mode: IntegrationMode) -> Result<f64> {
    if areas.len() != locations.len() || areas.len() < 2 {
        return Err(VolumeError::LengthMismatch(format!(
            "{} areas and {} locations; need two or more of each",
            areas.len(),
            locations.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = locations
        .iter()
        .copied()
        .zip(areas.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    for w in pairs.windows(2) {
        let ((l0, a0), (l1, a1)) = (w[0], w[1]);
        if l1 == l0 {
            return Err(VolumeError::DuplicateLocation(l0));
        }
        let h = (l1 - l0).abs();
        total += match mode {
            IntegrationMode::ArithmeticMean => (a0 + a1) * h / 2.0,
            IntegrationMode::TruncatedCone => (a0 + a1 + (a0 * a1).sqrt()) * h / 3.0,
        };
    }
    Ok(total)
}

/// Masks of one spatial slice and the geometry needed to place it.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMasks {
    /// One mask per frame.
    pub masks: Vec<Mask>,
    pub ipp: [f64; 3],
    pub iop: [f64; 6],
    pub acquisition_index: u32,
    /// Size of a mask pixel, mm.
    pub pixel_spacing_mm: f64,
}

/// Per-phase areas and locations after every cleanup step, ready to integrate.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStacks {
    pub es_areas: Vec<f64>,
    pub es_locations: Vec<f64>,
    pub ed_areas: Vec<f64>,
    pub ed_locations: Vec<f64>,
    pub flags: BTreeSet<VolumeFlag>,
    pub n_slices: usize,
}

/// Locations, retake removal, ES/ED frame choice, zero-slice removal and
/// edge trimming.
pub fn phase_stacks(slices: &[SliceMasks]) -> Result<PhaseStacks> {
    let mut records = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        records.push(SliceRecord {
            slice_id: i,
            location_mm: slice_location(&s.ipp, &s.iop)?,
            areas: s
                .masks
                .iter()
                .map(|m| slice_area(m, s.pixel_spacing_mm))
                .collect(),
            acquisition_index: s.acquisition_index,
        });
    }
    let mut flags = BTreeSet::new();
    let (mut records, deduped) = dedupe_retakes(records);
    if deduped {
        flags.insert(VolumeFlag::RetakeDeduped);
    }
    records.retain(|r| !r.areas.is_empty());
    records.sort_by(|a, b| a.location_mm.total_cmp(&b.location_mm));
    let n_slices = records.len();
    let (records, zeroed) = remove_zero_slices(records);
    if zeroed {
        flags.insert(VolumeFlag::ZeroSliceRemoved);
    }
    let locations: Vec<f64> = records.iter().map(|r| r.location_mm).collect();
    let (mut es, mut ed) = (Vec::new(), Vec::new());
    for r in &records {
        let (i, j) = select_es_ed_frames(&r.areas);
        es.push(r.areas[i]);
        ed.push(r.areas[j]);
    }
    let es_range = trim_edges(&es)?;
    let ed_range = trim_edges(&ed)?;
    if es_range.len() < es.len() || ed_range.len() < ed.len() {
        flags.insert(VolumeFlag::EdgeTrimmed);
    }
    Ok(PhaseStacks {
        es_areas: es[es_range.clone()].to_vec(),
        es_locations: locations[es_range].to_vec(),
        ed_areas: ed[ed_range.clone()].to_vec(),
        ed_locations: locations[ed_range].to_vec(),
        flags,
        n_slices,
    })
}

/// ESV, EDV (ml) and EF of one patient from filtered masks.
pub fn patient_volumes(slices: &[SliceMasks], mode: IntegrationMode) -> Result<VolumeResult> {
    let stacks = phase_stacks(slices)?;
    let too_few = |e: VolumeError, n: usize| match e {
        VolumeError::LengthMismatch(_) => VolumeError::TooFewSlices(n),
        other => other,
    };
    let esv = integrate(&stacks.es_areas, &stacks.es_locations, mode)
        .map_err(|e| too_few(e, stacks.es_areas.len()))?;
    let edv = integrate(&stacks.ed_areas, &stacks.ed_locations, mode)
        .map_err(|e| too_few(e, stacks.ed_areas.len()))?;
    if edv <= 0.0 {
        return Err(VolumeError::NonPositiveEdv);
    }
    let mut result = VolumeResult::new(esv / 1000.0, edv / 1000.0, stacks.n_slices);
    result.flags = stacks.flags;
    Ok(result)
}

/// ESV from one estimate and EDV from another, e.g. two models each tuned
/// for one phase.
pub fn combine_phases(esv_from: &VolumeResult, edv_from: &VolumeResult) -> VolumeResult {
    let mut out = VolumeResult::new(
        esv_from.esv_ml,
        edv_from.edv_ml,
        esv_from.n_slices.min(edv_from.n_slices),
    );
    out.flags = esv_from.flags.union(&edv_from.flags).copied().collect();
    out
}

/// Population ESV and EDV (ml) by age in years and sex.
///
/// Under 16 the volumes grow linearly with age; from 16 they are constant.
pub fn linear_model(age_years: f64, sex: Sex) -> Result<(f64, f64)> {
    if !(age_years >= 0.0) {
        return Err(VolumeError::InvalidAge(Some(age_years)));
    }
    let x = age_years;
    // Integer coefficients keep decimal results such as 46.9 correctly rounded.
    match (sex, x < 16.0) {
        (Sex::M, true) => Ok((469.0 * x / 100.0, (108.0 * x + 90.0) / 10.0)),
        (Sex::F, true) => Ok(((241.0 * x + 1500.0) / 100.0, (761.0 * x + 2200.0) / 100.0)),
        (Sex::M, false) => Ok((75.0, 181.0)),
        (Sex::F, false) => Ok((53.6, 144.0)),
        (Sex::Unknown, _) => Err(VolumeError::UnknownSex),
    }
}

/// Slice-count threshold below which both volumes come from the population model.
pub const MIN_SLICES: usize = 5;
/// Volumes below these (ml) are treated as segmentation failures.
pub const MIN_ESV_ML: f64 = 2.3;
pub const MIN_EDV_ML: f64 = 5.0;

/// Replaces implausible estimates with [`linear_model`] values.
///
/// Fewer than [`MIN_SLICES`] slices replaces both volumes; otherwise each
/// volume below its threshold is replaced on its own. EF is recomputed.
pub fn apply_fallbacks(
    mut result: VolumeResult,
    n_slices: usize,
    age: Option<f64>,
    sex: Sex,
) -> Result<VolumeResult> {
    let model = || -> Result<(f64, f64)> {
        let age = age.ok_or(VolumeError::InvalidAge(None))?;
        linear_model(age, sex)
    };
    if n_slices < MIN_SLICES {
        let (esv, edv) = model()?;
        result.esv_ml = esv;
        result.edv_ml = edv;
        result.flags.insert(VolumeFlag::FallbackFewSlices);
    } else {
        if result.esv_ml < MIN_ESV_ML {
            result.esv_ml = model()?.0;
            result.flags.insert(VolumeFlag::FallbackLowEsv);
        }
        if result.edv_ml < MIN_EDV_ML {
            result.edv_ml = model()?.1;
            result.flags.insert(VolumeFlag::FallbackLowEdv);
        }
    }
    result.n_slices = n_slices;
    result.ef = ejection_fraction(result.esv_ml, result.edv_ml);
    Ok(result)
}

/// [`patient_volumes`] followed by [`apply_fallbacks`]. A patient with too
/// few usable slices gets the population estimate outright.
pub fn volumes_with_fallback(
    slices: &[SliceMasks],
    mode: IntegrationMode,
    age: Option<f64>,
    sex: Sex,
) -> Result<VolumeResult> {
    match patient_volumes(slices, mode) {
        Ok(r) => {
            let n = r.n_slices;
            apply_fallbacks(r, n, age, sex)
        }
        Err(VolumeError::TooFewSlices(n)) => {
            apply_fallbacks(VolumeResult::new(0.0, 0.0, n), n, age, sex)
        }
        Err(VolumeError::NonPositiveEdv) => {
            let n = phase_stacks(slices).map_or(0, |s| s.n_slices);
            apply_fallbacks(VolumeResult::new(0.0, 0.0, n), n, age, sex)
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    #[default]
    Majority,
    Average,
}

fn check_shapes<T: Copy>(items: &[Image<T>]) -> Result<(usize, usize)> {
    let first = items.first().ok_or(VolumeError::Empty)?;
    let shape = (first.rows(), first.cols());
    if let Some(i) = items.iter().position(|m| (m.rows(), m.cols()) != shape) {
        return Err(VolumeError::ShapeMismatch(format!(
            "input {i} differs from input 0 ({shape:?})"
        )));
    }
    Ok(shape)
}

/// 1 where strictly more than half of the masks are 1.
pub fn ensemble_majority(masks: &[Mask]) -> Result<Mask> {
    let (rows, cols) = check_shapes(masks)?;
    let k = masks.len();
    Ok(Image::from_fn(rows, cols, |r, c| {
        let votes = masks.iter().filter(|m| m.get(r, c) != 0).count();
        u8::from(2 * votes > k)
    }))
}

/// Mean probability, binarized at 0.5 (strictly greater).
pub fn ensemble_average(probs: &[Image<f32>]) -> Result<Mask> {
    let (rows, cols) = check_shapes(probs)?;
    let k = probs.len() as f64;
    Ok(Image::from_fn(rows, cols, |r, c| {
        let mean = probs.iter().map(|p| p.get(r, c) as f64).sum::<f64>() / k;
        u8::from(mean > 0.5)
    }))
}
