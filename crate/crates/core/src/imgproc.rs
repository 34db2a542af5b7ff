//! Geometric and contrast normalization of 2-D images.
//!
//! Geometry steps (orientation, resampling, crop) have mask counterparts that
//! use nearest-neighbour sampling so labels stay binary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};
use crate::ingest::{iop_is_unit, ImageMeta, PhaseEncoding};

#[derive(Debug, Error, PartialEq)]
pub enum ImgprocError {
    #[error("pixel spacing must be positive, got row {row} col {col} target {target}")]
    NonPositiveSpacing { row: f64, col: f64, target: f64 },
    #[error("orientation cosines are not unit vectors: {0:?}")]
    InvalidIop([f64; 6]),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
}

pub type Result<T, E = ImgprocError> = std::result::Result<T, E>;

/// How values between pixel centres are reconstructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Pixel types that can be resampled.
pub trait Sample: Copy + Default {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Value at fractional position `(y, x)`; zero outside the half-pixel border.
pub fn sample<T: Sample>(img: &Image<T>, y: f64, x: f64, interp: Interp) -> T {
    let (rows, cols) = img.shape();
    let (y, x) = (snap(y), snap(x));
    if !(y >= -0.5 && y <= rows as f64 - 0.5 && x >= -0.5 && x <= cols as f64 - 0.5) {
        return T::default();
    }
    match interp {
        Interp::Nearest => {
            // Round half up, clamped onto the grid.
            let r = ((y + 0.5).floor() as usize).min(rows - 1);
            let c = ((x + 0.5).floor() as usize).min(cols - 1);
            img.get(r, c)
        }
        Interp::Bilinear => {
            let y = y.clamp(0.0, (rows - 1) as f64);
            let x = x.clamp(0.0, (cols - 1) as f64);
            let (r0, c0) = (y.floor() as usize, x.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
            let (fy, fx) = (y - r0 as f64, x - c0 as f64);
            let top = img.get(r0, c0).to_f64() * (1.0 - fx) + img.get(r0, c1).to_f64() * fx;
            let bot = img.get(r1, c0).to_f64() * (1.0 - fx) + img.get(r1, c1).to_f64() * fx;
            T::from_f64(top * (1.0 - fy) + bot * fy)
        }
    }
}

/// Builds a `rows x cols` image by pulling each output pixel from the source
/// position returned by `src(r, c)`.
pub fn warp<T: Sample>(
    img: &Image<T>,
    rows: usize,
    cols: usize,
    interp: Interp,
    mut src: impl FnMut(f64, f64) -> (f64, f64),
) -> Image<T> {
    Image::from_fn(rows, cols, |r, c| {
        let (y, x) = src(r as f64, c as f64);
        sample(img, y, x, interp)
    })
}

/// Rotation by `theta` radians about the image centre, same output size.
///
/// Output pixel offsets `(dy, dx)` from the centre read the source at the
/// offset rotated by `theta`.
pub fn rotate<T: Sample>(img: &Image<T>, theta: f64, interp: Interp) -> Image<T> {
    let (rows, cols) = img.shape();
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    warp(img, rows, cols, interp, |r, col| {
        let (dy, dx) = (r - cy, col - cx);
        (cy + dx * s + dy * c, cx + dx * c - dy * s)
    })
}

/// Which spacing drives the column scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpacingMode {
    /// Each axis uses its own spacing.
    #[default]
    PerAxis,
    /// Both axes use the row spacing.
    FirstSpacing,
}

/// Output dimensions after resampling one axis from `spacing` to `target`.
pub fn resampled_len(len: usize, spacing: f64, target: f64) -> usize {
    ((len as f64 * spacing / target).round() as usize).max(1)
}

fn resample_with<T: Sample>(
    img: &Image<T>,
    spacing_row: f64,
    spacing_col: f64,
    target: f64,
    mode: SpacingMode,
    interp: Interp,
) -> Result<Image<T>> {
    if !(spacing_row > 0.0 && spacing_col > 0.0 && target > 0.0) {
        return Err(ImgprocError::NonPositiveSpacing {
            row: spacing_row,
            col: spacing_col,
            target,
        });
    }
    let spacing_col = match mode {
        SpacingMode::PerAxis => spacing_col,
        SpacingMode::FirstSpacing => spacing_row,
    };
    let (sy, sx) = (spacing_row / target, spacing_col / target);
    let rows = resampled_len(img.rows(), spacing_row, target);
    let cols = resampled_len(img.cols(), spacing_col, target);
    Ok(warp(img, rows, cols, interp, |r, c| {
        ((r + 0.5) / sy - 0.5, (c + 0.5) / sx - 0.5)
    }))
}

/// Bilinear resampling to `target` mm pixels. Pixel centres are aligned,
/// so a constant image stays exactly constant.
pub fn resample(
    img: &Image<f32>,
    spacing_row: f64,
    spacing_col: f64,
    target: f64,
    mode: SpacingMode,
) -> Result<Image<f32>> {
    resample_with(
        img,
        spacing_row,
        spacing_col,
        target,
        mode,
        Interp::Bilinear,
    )
}

/// Nearest-neighbour counterpart of [`resample`] for label masks.
pub fn resample_mask(
    mask: &Mask,
    spacing_row: f64,
    spacing_col: f64,
    target: f64,
    mode: SpacingMode,
) -> Result<Mask> {
    resample_with(
        mask,
        spacing_row,
        spacing_col,
        target,
        mode,
        Interp::Nearest,
    )
}

/// Crops or zero-pads each axis to `size`, keeping the centre.
///
/// Odd surpluses leave the extra pixel on the trailing edge.
pub fn center_crop_pad<T: Copy + Default>(img: &Image<T>, size: usize) -> Image<T> {
    // Offset of the output origin inside the source (may be negative).
    let offset = |dim: usize| -> isize {
        if dim >= size {
            ((dim - size) / 2) as isize
        } else {
            -(((size - dim) / 2) as isize)
        }
    };
    let (or, oc) = (offset(img.rows()), offset(img.cols()));
    Image::from_fn(size, size, |r, c| {
        let (sr, sc) = (r as isize + or, c as isize + oc);
        if sr >= 0 && sc >= 0 && (sr as usize) < img.rows() && (sc as usize) < img.cols() {
            img.get(sr as usize, sc as usize)
        } else {
            T::default()
        }
    })
}

const CLAHE_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization.
///
/// The image's own `[min, max]` is split into 256 bins and each tile of the
/// `(tiles_y, tiles_x)` grid gets an equalizing lookup table; per-pixel
/// values blend the four nearest tile tables bilinearly. `clip` is the
/// histogram ceiling relative to a uniform bin height (0 disables clipping).
/// Output stays within the input's `[min, max]`.
pub fn clahe(img: &Image<f32>, clip: f64, grid: (usize, usize)) -> Image<f32> {
    let (rows, cols) = img.shape();
    let (lo, hi) = img.min_max();
    if img.is_empty() || hi <= lo {
        return img.clone();
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let ty = grid.0.clamp(1, rows);
    let tx = grid.1.clamp(1, cols);
    let bin_of = |v: f32| -> usize {
        (((v as f64 - lo) / (hi - lo) * CLAHE_BINS as f64) as usize).min(CLAHE_BINS - 1)
    };
    let bins: Vec<usize> = img.data().iter().map(|&v| bin_of(v)).collect();
    let bounds = |n: usize, t: usize| -> Vec<usize> { (0..=t).map(|i| i * n / t).collect() };
    let (rb, cb) = (bounds(rows, ty), bounds(cols, tx));

    let mut luts = vec![[0f64; CLAHE_BINS]; ty * tx];
    for i in 0..ty {
        for j in 0..tx {
            let mut hist = [0f64; CLAHE_BINS];
            for r in rb[i]..rb[i + 1] {
                for c in cb[j]..cb[j + 1] {
                    hist[bins[r * cols + c]] += 1.0;
                }
            }
            let n = ((rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j])) as f64;
            if clip > 0.0 {
                let limit = (clip * n / CLAHE_BINS as f64).max(1.0);
                let mut excess = 0.0;
                for h in hist.iter_mut() {
                    if *h > limit {
                        excess += *h - limit;
                        *h = limit;
                    }
                }
                let share = excess / CLAHE_BINS as f64;
                hist.iter_mut().for_each(|h| *h += share);
            }
            let lut = &mut luts[i * tx + j];
            let mut cdf = 0.0;
            let mut cdf_min = None;
            for (b, h) in hist.iter().enumerate() {
                cdf += h;
                if *h > 0.0 && cdf_min.is_none() {
                    cdf_min = Some(cdf);
                }
                lut[b] = cdf;
            }
            let cdf_min = cdf_min.unwrap_or(0.0);
            let span = n - cdf_min;
            for (b, v) in lut.iter_mut().enumerate() {
                *v = if span > 0.0 {
                    lo + ((*v - cdf_min).max(0.0) / span) * (hi - lo)
                } else {
                    lo + (b as f64 + 0.5) / CLAHE_BINS as f64 * (hi - lo)
                };
            }
        }
    }
    if ty == 1 && tx == 1 {
        return Image::from_vec(
            rows,
            cols,
            bins.iter().map(|&b| luts[0][b] as f32).collect(),
        );
    }

    // Position of a pixel between tile centres along one axis.
    let locate = |p: usize, b: &[usize]| -> (usize, usize, f64) {
        let t = b.len() - 1;
        let centre = |i: usize| (b[i] + b[i + 1]) as f64 / 2.0 - 0.5;
        let p = p as f64;
        if p <= centre(0) {
            return (0, 0, 0.0);
        }
        if p >= centre(t - 1) {
            return (t - 1, t - 1, 0.0);
        }
        let i = (0..t - 1).find(|&i| p < centre(i + 1)).unwrap_or(t - 2);
        let f = (p - centre(i)) / (centre(i + 1) - centre(i));
        (i, i + 1, f)
    };
    let row_pos: Vec<_> = (0..rows).map(|r| locate(r, &rb)).collect();
    let col_pos: Vec<_> = (0..cols).map(|c| locate(c, &cb)).collect();
    Image::from_fn(rows, cols, |r, c| {
        let b = bins[r * cols + c];
        let (i0, i1, fy) = row_pos[r];
        let (j0, j1, fx) = col_pos[c];
        let l = |i: usize, j: usize| luts[i * tx + j][b];
        let top = l(i0, j0) * (1.0 - fx) + l(i0, j1) * fx;
        let bot = l(i1, j0) * (1.0 - fx) + l(i1, j1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntensityNorm {
    #[default]
    MinMax,
    ZScore,
    None,
}

/// Rescales intensities. The flag is true when the image was constant, in
/// which case the result is all zeros.
pub fn normalize_intensity(img: &Image<f32>, mode: IntensityNorm) -> (Image<f32>, bool) {
    let zeros = || Image::filled(img.rows(), img.cols(), 0.0f32);
    match mode {
        IntensityNorm::None => (img.clone(), false),
        IntensityNorm::MinMax => {
            let (lo, hi) = img.min_max();
            if img.is_empty() || hi <= lo {
                return (zeros(), true);
            }
            let (lo, span) = (lo as f64, hi as f64 - lo as f64);
            (img.map(|v| ((v as f64 - lo) / span) as f32), false)
        }
        IntensityNorm::ZScore => {
            let n = img.len() as f64;
            let mean = img.sum() / n;
            let var = img
                .data()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            if img.is_empty() || std <= 0.0 {
                return (zeros(), true);
            }
            (img.map(|v| ((v as f64 - mean) / std) as f32), false)
        }
    }
}

/// Transposes column-encoded images so every image is row-encoded.
pub fn orient_row_major<T: Copy>(img: &Image<T>, phase: PhaseEncoding) -> Image<T> {
    match phase {
        PhaseEncoding::Col => img.transpose(),
        PhaseEncoding::Row | PhaseEncoding::Unknown => img.clone(),
    }
}

/// In-plane angle of the row direction cosine, radians.
pub fn iop_angle(iop: &[f64; 6]) -> Result<f64> {
    if !iop_is_unit(iop) {
        return Err(ImgprocError::InvalidIop(*iop));
    }
    Ok(iop[1].atan2(iop[0]))
}

/// Rotates so the row direction cosine lines up with +x.
pub fn orient_common_vector(img: &Image<f32>, iop: &[f64; 6]) -> Result<Image<f32>> {
    Ok(rotate(img, iop_angle(iop)?, Interp::Bilinear))
}

pub fn orient_common_vector_mask(mask: &Mask, iop: &[f64; 6]) -> Result<Mask> {
    Ok(rotate(mask, iop_angle(iop)?, Interp::Nearest))
}

/// Element `(r, c)` moves to `(R-1-r, C-1-c)`.
pub fn rotate180<T: Copy>(img: &Image<T>) -> Image<T> {
    let mut data = img.data().to_vec();
    data.reverse();
    Image::from_vec(img.rows(), img.cols(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    M1T0,
    M1T1,
    #[default]
    M1T2,
    M2T0,
    M2T1,
    M2T2,
}

impl std::str::FromStr for Method {
    type Err = ImgprocError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| ImgprocError::InvalidRecipe(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessRecipe {
    pub method: Method,
    pub crop_size: usize,
    pub clahe_clip: f64,
    pub clahe_grid: (usize, usize),
    pub intensity_norm: IntensityNorm,
    /// Output pixel size, mm.
    pub target_spacing: f64,
}

impl Default for PreprocessRecipe {
    fn default() -> Self {
        PreprocessRecipe {
            method: Method::M1T2,
            crop_size: 176,
            clahe_clip: 2.0,
            clahe_grid: (1, 1),
            intensity_norm: IntensityNorm::MinMax,
            target_spacing: 1.0,
        }
    }
}

impl PreprocessRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(ImgprocError::InvalidRecipe(
                "crop_size must be positive".into(),
            ));
        }
        if !(self.clahe_clip >= 0.0) {
            return Err(ImgprocError::InvalidRecipe(
                "clahe_clip must be non-negative".into(),
            ));
        }
        if self.clahe_grid.0 == 0 || self.clahe_grid.1 == 0 {
            return Err(ImgprocError::InvalidRecipe(
                "clahe_grid must be at least (1, 1)".into(),
            ));
        }
        if !(self.target_spacing > 0.0) {
            return Err(ImgprocError::InvalidRecipe(
                "target_spacing must be positive".into(),
            ));
        }
        Ok(())
    }

    fn steps(&self) -> Steps {
        use Method::*;
        let m = self.method;
        Steps {
            transpose: matches!(m, M1T0 | M1T1),
            rotate: matches!(m, M2T0 | M2T1),
            resample: match m {
                M1T0 => Some(SpacingMode::FirstSpacing),
                M2T0 => None,
                _ => Some(SpacingMode::PerAxis),
            },
            clahe: matches!(m, M1T0 | M1T1 | M1T2),
            normalize: m != Baseline,
        }
    }
}

struct Steps {
    transpose: bool,
    rotate: bool,
    resample: Option<SpacingMode>,
    clahe: bool,
    normalize: bool,
}

/// Spacings after an optional transpose: rows and columns swap roles.
fn spacings(meta: &ImageMeta, transposed: bool) -> (f64, f64) {
    if transposed {
        (meta.pixel_spacing_col, meta.pixel_spacing_row)
    } else {
        (meta.pixel_spacing_row, meta.pixel_spacing_col)
    }
}

/// Runs every step of `recipe` on one image. Geometry comes first,
/// intensity normalization last.
pub fn preprocess(
    img: &Image<f32>,
    meta: &ImageMeta,
    recipe: &PreprocessRecipe,
) -> Result<Image<f32>> {
    recipe.validate()?;
    let steps = recipe.steps();
    let transposed = steps.transpose && meta.phase_encoding == PhaseEncoding::Col;
    let mut out = if steps.transpose {
        orient_row_major(img, meta.phase_encoding)
    } else {
        img.clone()
    };
    if steps.rotate {
        out = orient_common_vector(&out, &meta.iop)?;
    }
    if let Some(mode) = steps.resample {
        let (sr, sc) = spacings(meta, transposed);
        out = resample(&out, sr, sc, recipe.target_spacing, mode)?;
    }
    out = center_crop_pad(&out, recipe.crop_size);
    if steps.clahe {
        out = clahe(&out, recipe.clahe_clip, recipe.clahe_grid);
    }
    if steps.normalize {
        out = normalize_intensity(&out, recipe.intensity_norm).0;
    }
    Ok(out)
}

/// The geometric part of [`preprocess`], applied to a label mask.
pub fn preprocess_mask(mask: &Mask, meta: &ImageMeta, recipe: &PreprocessRecipe) -> Result<Mask> {
    recipe.validate()?;
    let steps = recipe.steps();
    let transposed = steps.transpose && meta.phase_encoding == PhaseEncoding::Col;
    let mut out = if steps.transpose {
        orient_row_major(mask, meta.phase_encoding)
    } else {
        mask.clone()
    };
    if steps.rotate {
        out = orient_common_vector_mask(&out, &meta.iop)?;
    }
    if let Some(mode) = steps.resample {
        let (sr, sc) = spacings(meta, transposed);
        out = resample_mask(&out, sr, sc, recipe.target_spacing, mode)?;
    }
    Ok(center_crop_pad(&out, recipe.crop_size))
}
