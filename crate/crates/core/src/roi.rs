//! Locating the heart from cardiac motion.
//!
//! Pixels whose intensity oscillates at the heart rate light up in the first
//! temporal harmonic. Those maps are summed over slices, split into two
//! clusters, and searched for circles; the circles' bounding box, padded a
//! little, is the region of interest.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};

#[derive(Debug, Error, PartialEq)]
pub enum RoiError {
    #[error("need at least 2 frames for a harmonic map, got {0}")]
    TooFewFrames(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("map is constant; nothing to cluster")]
    DegenerateMap,
    #[error("no circles to bound")]
    NoCircles,
    #[error("invalid rectangle: {0}")]
    InvalidRect(String),
    #[error("rectangle {rect:?} exceeds a {rows}x{cols} image")]
    RectOutOfBounds {
        rect: RoiRect,
        rows: usize,
        cols: usize,
    },
    #[error("no region of interest found")]
    RoiNotFound,
}

pub type Result<T, E = RoiError> = std::result::Result<T, E>;

/// Half-open pixel rectangle `[row_min, row_max) x [col_min, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiRect {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl RoiRect {
    pub fn new(row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min >= row_max || col_min >= col_max {
            return Err(RoiError::InvalidRect(format!(
                "rows [{row_min}, {row_max}) cols [{col_min}, {col_max}) is empty"
            )));
        }
        Ok(RoiRect {
            row_min,
            row_max,
            col_min,
            col_max,
        })
    }

    /// The whole `rows x cols` image.
    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        RoiRect::new(0, rows, 0, cols)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..self.row_max).contains(&r) && (self.col_min..self.col_max).contains(&c)
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub row: usize,
    pub col: usize,
    pub radius: usize,
    /// Boundary pixels that voted for this circle.
    pub votes: u32,
    /// Votes divided by the number of pixels on the circle.
    pub score: f64,
}

/// Magnitude of DFT bin 1 of every pixel's time series.
pub fn first_harmonic_map<T: Copy + Into<f64>>(series: &[Image<T>]) -> Result<Image<f64>> {
    let t = series.len();
    if t < 2 {
        return Err(RoiError::TooFewFrames(t));
    }
    let shape = series[0].shape();
    if let Some(f) = series.iter().position(|im| im.shape() != shape) {
        return Err(RoiError::ShapeMismatch(format!(
            "frame {f} is {:?}, frame 0 is {shape:?}",
            series[f].shape()
        )));
    }
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..t)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / t as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut re = vec![0f64; shape.0 * shape.1];
    let mut im = vec![0f64; shape.0 * shape.1];
    for (k, frame) in series.iter().enumerate() {
        for (i, &v) in frame.data().iter().enumerate() {
            let v: f64 = v.into();
            re[i] += v * cos[k];
            im[i] -= v * sin[k];
        }
    }
    Ok(Image::from_vec(
        shape.0,
        shape.1,
        re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect(),
    ))
}

/// Sum of the per-slice first-harmonic maps, accumulated in slice order.
pub fn harmonic_sum<T: Copy + Into<f64>>(slices: &[Vec<Image<T>>]) -> Result<Image<f64>> {
    let mut total: Option<Image<f64>> = None;
    for (s, frames) in slices.iter().enumerate() {
        let map = first_harmonic_map(frames)?;
        match &mut total {
            None => total = Some(map),
            Some(acc) => {
                if acc.shape() != map.shape() {
                    return Err(RoiError::ShapeMismatch(format!(
                        "slice {s} is {:?}, slice 0 is {:?}",
                        map.shape(),
                        acc.shape()
                    )));
                }
                acc.data_mut()
                    .iter_mut()
                    .zip(map.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    total.ok_or(RoiError::ShapeMismatch("no slices".into()))
}

/// Two-cluster 1-D k-means on pixel values; 1 marks the higher cluster.
///
/// Centroids start at the minimum and maximum and iterate until no pixel
/// changes side. Values equidistant from both centroids go high.
pub fn binarize_kmeans2(map: &Image<f64>) -> Result<Mask> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return Err(RoiError::DegenerateMap);
    }
    let (mut c0, mut c1) = (lo, hi);
    let mut labels = vec![0u8; map.len()];
    loop {
        let mut changed = false;
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for (l, &v) in labels.iter_mut().zip(map.data()) {
            let high = u8::from((v - c1).abs() <= (v - c0).abs());
            changed |= *l != high;
            *l = high;
            if high == 1 {
                s1 += v;
                n1 += 1;
            } else {
                s0 += v;
                n0 += 1;
            }
        }
        if n0 > 0 {
            c0 = s0 / n0 as f64;
        }
        if n1 > 0 {
            c1 = s1 / n1 as f64;
        }
        if !changed {
            break;
        }
    }
    Ok(Image::from_vec(map.rows(), map.cols(), labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughParams {
    pub r_min: usize,
    pub r_max: usize,
    /// Maximum number of circles returned.
    pub keep: usize,
    /// Minimum distance between returned centres; defaults to `r_min`.
    pub min_dist: Option<f64>,
    /// Circles supported by less than this fraction of their perimeter are ignored.
    pub min_score: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        HoughParams {
            r_min: 15,
            r_max: 64,
            keep: 30,
            min_dist: None,
            min_score: 0.25,
        }
    }
}

/// Integer offsets of a digital circle of radius `r`, without duplicates.
fn circle_offsets(r: usize) -> Vec<(isize, isize)> {
    let n = (16 * r).max(8);
    let mut pts: Vec<(isize, isize)> = (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            let rf = r as f64;
            (
                (rf * a.sin()).round() as isize,
                (rf * a.cos()).round() as isize,
            )
        })
        .collect();
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Foreground pixels with a background (or out-of-image) 4-neighbour.
fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (rows, cols) = mask.shape();
    let on = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < rows
            && (c as usize) < cols
            && mask.get(r as usize, c as usize) != 0
    };
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (ri, ci) = (r as isize, c as isize);
            if on(ri, ci) && !(on(ri - 1, ci) && on(ri + 1, ci) && on(ri, ci - 1) && on(ri, ci + 1))
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Circle Hough transform with 1-pixel centre and radius bins.
///
/// Boundary pixels of `binary` vote for every centre at distance `r`.
/// Candidates are ranked by score (then votes, then smaller radius and
/// raster position) and greedily kept if their centre is at least
/// `min_dist` from every circle already kept.
pub fn hough_circles(binary: &Mask, params: &HoughParams) -> Vec<Circle> {
    let (rows, cols) = binary.shape();
    let edges = boundary_pixels(binary);
    if edges.is_empty() || params.keep == 0 || params.r_min > params.r_max {
        return Vec::new();
    }
    let mut candidates = Vec::new();
    let mut acc = vec![0u32; rows * cols];
    for r in params.r_min.max(1)..=params.r_max {
        let offsets = circle_offsets(r);
        acc.iter_mut().for_each(|v| *v = 0);
        for &(y, x) in &edges {
            for &(dy, dx) in &offsets {
                let (cy, cx) = (y as isize + dy, x as isize + dx);
                if cy >= 0 && cx >= 0 && (cy as usize) < rows && (cx as usize) < cols {
                    acc[cy as usize * cols + cx as usize] += 1;
                }
            }
        }
        let n = offsets.len() as f64;
        for (i, &votes) in acc.iter().enumerate() {
            let score = votes as f64 / n;
            if votes > 0 && score >= params.min_score {
                candidates.push(Circle {
                    row: i / cols,
                    col: i % cols,
                    radius: r,
                    votes,
                    score,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.votes.cmp(&a.votes))
            .then(a.radius.cmp(&b.radius))
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    let min_dist = params.min_dist.unwrap_or(params.r_min as f64);
    let mut kept: Vec<Circle> = Vec::new();
    for c in candidates {
        let far = kept.iter().all(|k| {
            let (dy, dx) = (k.row as f64 - c.row as f64, k.col as f64 - c.col as f64);
            dy.hypot(dx) >= min_dist
        });
        if far {
            kept.push(c);
            if kept.len() == params.keep {
                break;
            }
        }
    }
    kept
}

/// Bounding box of all circle extents, widened on each side by
/// `expand_frac` of its own height / width and clamped to the image.
pub fn roi_rectangle(
    circles: &[Circle],
    expand_frac: f64,
    rows: usize,
    cols: usize,
) -> Result<RoiRect> {
    if circles.is_empty() {
        return Err(RoiError::NoCircles);
    }
    let ext = |f: fn(&Circle) -> (isize, isize)| {
        circles
            .iter()
            .map(f)
            .fold((isize::MAX, isize::MIN), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            })
    };
    let (r0, r1) = ext(|c| {
        (
            c.row as isize - c.radius as isize,
            (c.row + c.radius) as isize,
        )
    });
    let (c0, c1) = ext(|c| {
        (
            c.col as isize - c.radius as isize,
            (c.col + c.radius) as isize,
        )
    });
    let grow = |lo: isize, hi: isize, dim: usize| -> (usize, usize) {
        let pad = ((hi - lo) as f64 * expand_frac).ceil() as isize;
        let lo = (lo - pad).clamp(0, dim as isize) as usize;
        let hi = (hi + pad).clamp(0, dim as isize) as usize;
        (lo, hi)
    };
    let (row_min, row_max) = grow(r0, r1, rows);
    let (col_min, col_max) = grow(c0, c1, cols);
    RoiRect::new(row_min, row_max, col_min, col_max)
}

/// Zeroes everything outside `rect`.
pub fn apply_roi<T: Copy + Default>(img: &Image<T>, rect: &RoiRect) -> Result<Image<T>> {
    let (rows, cols) = img.shape();
    if rect.row_max > rows || rect.col_max > cols {
        return Err(RoiError::RectOutOfBounds {
            rect: *rect,
            rows,
            cols,
        });
    }
    Ok(Image::from_fn(rows, cols, |r, c| {
        if rect.contains(r, c) {
            img.get(r, c)
        } else {
            T::default()
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiParams {
    pub hough: HoughParams,
    pub expand_frac: f64,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams {
            hough: HoughParams::default(),
            expand_frac: 0.10,
        }
    }
}

/// Everything [`detect_roi`] computed on the way to the rectangle.
#[derive(Clone, Debug)]
pub struct RoiDetection {
    pub rect: RoiRect,
    pub harmonic: Image<f64>,
    pub binary: Mask,
    pub circles: Vec<Circle>,
}

/// Harmonic sum, k-means split, Hough circles and padded bounding box for
/// one patient's slices (each a list of frames).
pub fn detect_roi<T: Copy + Into<f64>>(
    slices: &[Vec<Image<T>>],
    params: &RoiParams,
) -> Result<RoiDetection> {
    let harmonic = harmonic_sum(slices)?;
    let binary = match binarize_kmeans2(&harmonic) {
        Ok(b) => b,
        Err(RoiError::DegenerateMap) => return Err(RoiError::RoiNotFound),
        Err(e) => return Err(e),
    };
    let circles = hough_circles(&binary, &params.hough);
    let rect = match roi_rectangle(
        &circles,
        params.expand_frac,
        harmonic.rows(),
        harmonic.cols(),
    ) {
        Ok(r) => r,
        Err(RoiError::NoCircles) => return Err(RoiError::RoiNotFound),
        Err(e) => return Err(e),
    };
    Ok(RoiDetection {
        rect,
        harmonic,
        binary,
        circles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(rows: usize, cols: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Image::from_fn(rows, cols, |y, x| {
            let d = (y as f64 - cy).hypot(x as f64 - cx);
            u8::from((d - r).abs() <= 1.0)
        })
    }

    #[test]
    fn harmonic_of_pure_cosine() {
        let t = 20;
        let a = 3.5;
        let frames: Vec<Image<f64>> = (0..t)
            .map(|k| Image::filled(2, 3, a * (2.0 * PI * k as f64 / t as f64).cos() + 7.0))
            .collect();
        let map = first_harmonic_map(&frames).unwrap();
        assert!(map
            .data()
            .iter()
            .all(|&v| (v - a * t as f64 / 2.0).abs() < 1e-9));
        let still: Vec<Image<f64>> = vec![Image::filled(2, 2, 4.0); 5];
        assert!(first_harmonic_map(&still)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v.abs() < 1e-9));
        assert_eq!(
            first_harmonic_map(&still[..1]),
            Err(RoiError::TooFewFrames(1))
        );
    }

    #[test]
    fn harmonic_sum_adds_slices() {
        let frames: Vec<Image<f32>> = (0..8)
            .map(|k| Image::filled(3, 3, (k % 4) as f32))
            .collect();
        let one = harmonic_sum(std::slice::from_ref(&frames)).unwrap();
        let two = harmonic_sum(&[frames.clone(), frames]).unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_splits() {
        let m = Image::from_vec(1, 4, vec![0.0, 0.0, 10.0, 10.0]);
        assert_eq!(binarize_kmeans2(&m).unwrap().data(), &[0, 0, 1, 1]);
        let m = Image::from_vec(1, 4, vec![0.0, 1.0, 9.0, 10.0]);
        assert_eq!(binarize_kmeans2(&m).unwrap().data(), &[0, 0, 1, 1]);
        assert_eq!(
            binarize_kmeans2(&Image::filled(2, 2, 3.0)),
            Err(RoiError::DegenerateMap)
        );
    }

    #[test]
    fn single_ring_is_found() {
        let img = ring(120, 130, 50.0, 60.0, 20.0);
        let circles = hough_circles(&img, &HoughParams::default());
        let top = circles[0];
        assert!(
            top.row.abs_diff(50) <= 2 && top.col.abs_diff(60) <= 2 && top.radius.abs_diff(20) <= 2
        );
        assert!(hough_circles(&Image::filled(50, 50, 0), &HoughParams::default()).is_empty());
    }

    #[test]
    fn two_rings_are_both_found() {
        let mut img = ring(160, 160, 40.0, 40.0, 18.0);
        let other = ring(160, 160, 110.0, 110.0, 30.0);
        img.data_mut()
            .iter_mut()
            .zip(other.data())
            .for_each(|(a, b)| *a |= b);
        let circles = hough_circles(&img, &HoughParams::default());
        let near = |y: usize, x: usize, r: usize| {
            circles.iter().any(|c| {
                c.row.abs_diff(y) <= 2 && c.col.abs_diff(x) <= 2 && c.radius.abs_diff(r) <= 2
            })
        };
        assert!(near(40, 40, 18) && near(110, 110, 30));
    }

    #[test]
    fn rectangle_rules() {
        let c = Circle {
            row: 50,
            col: 50,
            radius: 20,
            votes: 1,
            score: 1.0,
        };
        assert_eq!(
            roi_rectangle(&[c], 0.1, 200, 200).unwrap(),
            RoiRect::new(26, 74, 26, 74).unwrap()
        );
        assert_eq!(
            roi_rectangle(&[c], 0.0, 200, 200).unwrap(),
            RoiRect::new(30, 70, 30, 70).unwrap()
        );
        let edge = Circle {
            row: 5,
            col: 195,
            ..c
        };
        let r = roi_rectangle(&[edge], 0.1, 200, 200).unwrap();
        assert_eq!((r.row_min, r.col_max), (0, 200));
        assert_eq!(roi_rectangle(&[], 0.1, 10, 10), Err(RoiError::NoCircles));
    }

    #[test]
    fn applying_roi() {
        let img = Image::from_fn(6, 6, |r, c| (r * 6 + c) as f32);
        let full = RoiRect::full(6, 6).unwrap();
        assert_eq!(apply_roi(&img, &full).unwrap(), img);
        let rect = RoiRect::new(1, 4, 2, 5).unwrap();
        let out = apply_roi(&img, &rect).unwrap();
        let inside: f64 = (1..4)
            .flat_map(|r| (2..5).map(move |c| (r * 6 + c) as f64))
            .sum();
        assert_eq!(out.sum(), inside);
        assert_eq!(apply_roi(&out, &rect).unwrap(), out);
        assert!(RoiRect::new(3, 3, 0, 1).is_err());
        let big = RoiRect::new(0, 7, 0, 6).unwrap();
        assert!(matches!(
            apply_roi(&img, &big),
            Err(RoiError::RectOutOfBounds { .. })
        ));
    }

    fn pulsing_disc(size: usize, discs: &[(f64, f64, f64, f64)], t: usize) -> Vec<Image<f32>> {
        (0..t)
            .map(|k| {
                let phase = (2.0 * PI * k as f64 / t as f64).cos();
                Image::from_fn(size, size, |y, x| {
                    let mut v = 100.0;
                    for &(cy, cx, r, amp) in discs {
                        let rr = r + amp * phase;
                        if (y as f64 - cy).hypot(x as f64 - cx) <= rr {
                            v += 500.0;
                        }
                    }
                    v as f32
                })
            })
            .collect()
    }

    #[test]
    fn detects_pulsating_disc() {
        let frames = pulsing_disc(128, &[(64.0, 70.0, 22.0, 4.0)], 20);
        let det = detect_roi(&[frames.clone(), frames], &RoiParams::default()).unwrap();
        let r = det.rect;
        assert!(r.row_min <= 64 - 26 && r.row_max >= 64 + 26, "{r:?}");
        assert!(r.col_min <= 70 - 26 && r.col_max >= 70 + 26, "{r:?}");
    }

    #[test]
    fn static_stack_has_no_roi() {
        let frames = vec![Image::filled(64, 64, 10.0f32); 6];
        assert_eq!(
            detect_roi(&[frames], &RoiParams::default()).unwrap_err(),
            RoiError::RoiNotFound
        );
    }
}
