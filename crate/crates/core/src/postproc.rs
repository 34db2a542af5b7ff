//! Removing spurious predicted contours.
//!
//! A prediction may contain several blobs. Either the largest one is kept,
//! or the one containing the patient's LV centre, found from where the
//! predictions pile up across all images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("every prediction is blank; no centre to find")]
    NoSignal,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no masks given")]
    Empty,
}

pub type Result<T, E = PostprocError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Connected components of a mask. Ids run from 1 in raster order of each
/// component's first pixel; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledComponents {
    pub labels: Image<u32>,
    /// Pixel count of component `id` at index `id - 1`.
    pub counts: Vec<usize>,
    /// `(row, col)` centroid of each component.
    pub centroids: Vec<(f64, f64)>,
}

impl LabeledComponents {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Mask of the pixels labeled `id`.
    pub fn select(&self, id: u32) -> Mask {
        self.labels.map(|l| u8::from(l == id && id != 0))
    }
}

/// Labels connected foreground (non-zero) pixels.
pub fn components(mask: &Mask, connectivity: Connectivity) -> LabeledComponents {
    let (rows, cols) = mask.shape();
    let mut labels = Image::filled(rows, cols, 0u32);
    let mut counts = Vec::new();
    let mut centroids = Vec::new();
    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if mask.get(r, c) == 0 || labels.get(r, c) != 0 {
                continue;
            }
            let id = counts.len() as u32 + 1;
            labels.set(r, c, id);
            stack.push((r, c));
            let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
            while let Some((y, x)) = stack.pop() {
                n += 1;
                sr += y as f64;
                sc += x as f64;
                for &(dy, dx) in neighbours {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= rows || nx as usize >= cols {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask.get(ny, nx) != 0 && labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, id);
                        stack.push((ny, nx));
                    }
                }
            }
            counts.push(n);
            centroids.push((sr / n as f64, sc / n as f64));
        }
    }
    LabeledComponents {
        labels,
        counts,
        centroids,
    }
}

/// Keeps only the component with the most pixels; ties go to the lowest id.
pub fn keep_largest(mask: &Mask, connectivity: Connectivity) -> Mask {
    let comps = components(mask, connectivity);
    let mut best: Option<(usize, usize)> = None;
    for (i, &n) in comps.counts.iter().enumerate() {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((i, n));
        }
    }
    match best {
        Some((i, _)) => comps.select(i as u32 + 1),
        None => Image::filled(mask.rows(), mask.cols(), 0),
    }
}

/// Default fraction of the heatmap maximum that counts as "hot".
pub const DEFAULT_CENTER_FRACTION: f64 = 0.9;

/// Centroid `(row, col)` of the pixels where the summed predictions reach
/// `fraction` of their maximum.
pub fn lv_center(masks: &[Mask], fraction: f64) -> Result<(f64, f64)> {
    let first = masks.first().ok_or(PostprocError::Empty)?;
    let shape = first.shape();
    let mut heat = vec![0u32; first.len()];
    for (i, m) in masks.iter().enumerate() {
        if m.shape() != shape {
            return Err(PostprocError::ShapeMismatch(format!(
                "mask {i} is {:?}, mask 0 is {shape:?}",
                m.shape()
            )));
        }
        for (h, &v) in heat.iter_mut().zip(m.data()) {
            *h += u32::from(v != 0);
        }
    }
    let max = heat.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(PostprocError::NoSignal);
    }
    let cut = fraction * max as f64;
    let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
    for (i, &h) in heat.iter().enumerate() {
        if h as f64 >= cut {
            n += 1;
            sr += (i / shape.1) as f64;
            sc += (i % shape.1) as f64;
        }
    }
    Ok((sr / n as f64, sc / n as f64))
}

/// Pixel containing `center`, rounding halves up; `None` when outside.
pub fn center_pixel(center: (f64, f64), rows: usize, cols: usize) -> Option<(usize, usize)> {
    let r = (center.0 + 0.5).floor();
    let c = (center.1 + 0.5).floor();
    (r >= 0.0 && c >= 0.0 && (r as usize) < rows && (c as usize) < cols)
        .then_some((r as usize, c as usize))
}

/// Keeps the component containing `center`, or nothing if the centre lies
/// in background.
pub fn filter_by_center(mask: &Mask, center: (f64, f64), connectivity: Connectivity) -> Mask {
    let (rows, cols) = mask.shape();
    let blank = || Image::filled(rows, cols, 0u8);
    let Some((r, c)) = center_pixel(center, rows, cols) else {
        return blank();
    };
    if mask.get(r, c) == 0 {
        return blank();
    }
    let comps = components(mask, connectivity);
    comps.select(comps.labels.get(r, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Largest,
    #[default]
    Center,
}

impl std::str::FromStr for FilterMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "largest" => Ok(FilterMethod::Largest),
            "center" => Ok(FilterMethod::Center),
            other => Err(format!("unknown filter method {other:?}")),
        }
    }
}

/// Filters every mask of one patient with the chosen method. With the
/// centre method and no signal at all, the masks are already blank and are
/// returned unchanged.
pub fn filter_patient(
    masks: &[Mask],
    method: FilterMethod,
    connectivity: Connectivity,
    fraction: f64,
) -> Result<Vec<Mask>> {
    match method {
        FilterMethod::Largest => Ok(masks
            .iter()
            .map(|m| keep_largest(m, connectivity))
            .collect()),
        FilterMethod::Center => match lv_center(masks, fraction) {
            Ok(center) => Ok(masks
                .iter()
                .map(|m| filter_by_center(m, center, connectivity))
                .collect()),
            Err(PostprocError::NoSignal) => Ok(masks.to_vec()),
            Err(e) => Err(e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&str]) -> Mask {
        let cols = rows[0].len();
        Image::from_vec(
            rows.len(),
            cols,
            rows.iter()
                .flat_map(|r| r.bytes().map(|b| u8::from(b == b'#')))
                .collect(),
        )
    }

    #[test]
    fn connectivity_matters_on_diagonals() {
        let m = from_rows(&["#.", ".#"]);
        assert_eq!(components(&m, Connectivity::Eight).len(), 1);
        assert_eq!(components(&m, Connectivity::Four).len(), 2);
        assert!(components(&Image::filled(3, 3, 0), Connectivity::Eight).is_empty());
    }

    #[test]
    fn counts_and_centroids() {
        let m = from_rows(&["##..", "##..", "...#"]);
        let c = components(&m, Connectivity::Four);
        assert_eq!(c.counts, vec![4, 1]);
        assert_eq!(c.centroids, vec![(0.5, 0.5), (2.0, 3.0)]);
        assert_eq!(c.counts.iter().sum::<usize>(), m.count_ones());
    }

    #[test]
    fn largest_wins_and_ties_go_first() {
        let m = from_rows(&["###..", ".....", "...##"]);
        assert_eq!(
            keep_largest(&m, Connectivity::Eight),
            from_rows(&["###..", ".....", "....."])
        );
        let tie = from_rows(&["##.##"]);
        assert_eq!(
            keep_largest(&tie, Connectivity::Eight),
            from_rows(&["##..."])
        );
        let blank = Image::filled(2, 2, 0u8);
        assert_eq!(keep_largest(&blank, Connectivity::Eight), blank);
    }

    #[test]
    fn center_of_shared_block() {
        let block = Image::from_fn(10, 10, |r, c| {
            u8::from((2..7).contains(&r) && (3..8).contains(&c))
        });
        assert_eq!(
            lv_center(&[block.clone(), block.clone()], 0.9).unwrap(),
            (4.0, 5.0)
        );
        let blank = Image::filled(10, 10, 0u8);
        assert_eq!(
            lv_center(&[blank.clone(), blank], 0.9),
            Err(PostprocError::NoSignal)
        );
        assert_eq!(lv_center(&[], 0.9), Err(PostprocError::Empty));
    }

    #[test]
    fn center_filter() {
        let m = from_rows(&["##...", "##...", "...##"]);
        assert_eq!(
            filter_by_center(&m, (0.5, 0.5), Connectivity::Eight),
            from_rows(&["##...", "##...", "....."])
        );
        assert_eq!(
            filter_by_center(&m, (2.4, 3.6), Connectivity::Eight),
            from_rows(&[".....", ".....", "...##"])
        );
        assert_eq!(
            filter_by_center(&m, (0.0, 3.0), Connectivity::Eight).count_ones(),
            0
        );
        assert_eq!(
            filter_by_center(&m, (-5.0, 0.0), Connectivity::Eight).count_ones(),
            0
        );
        assert_eq!(center_pixel((1.5, 2.5), 5, 5), Some((2, 3)));
    }

    #[test]
    fn patient_filter_handles_blank_records() {
        let blank = vec![Image::filled(4, 4, 0u8); 3];
        assert_eq!(
            filter_patient(&blank, FilterMethod::Center, Connectivity::Eight, 0.9).unwrap(),
            blank
        );
    }
}
