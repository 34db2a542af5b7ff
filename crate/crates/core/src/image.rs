//! Dense row-major 2-D grids shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

/// A row-major 2-D array of pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Binary mask: every element is 0 or 1.
pub type Mask = Image<u8>;

impl<T: Copy> Image<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Image {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wraps `data` as a `rows x cols` image.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "image buffer length does not match {rows}x{cols}"
        );
        Image { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Image { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Image<U> {
        Image {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Swaps rows and columns.
    pub fn transpose(&self) -> Self {
        Image::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

impl Image<u16> {
    pub fn to_f32(&self) -> Image<f32> {
        self.map(f32::from)
    }
}

impl Image<u8> {
    /// Number of set pixels.
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

impl Image<f32> {
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Rounds and clamps into the canonical unsigned 16-bit range.
    pub fn to_u16_saturating(&self) -> Image<u16> {
        self.map(|v| v.round().clamp(0.0, u16::MAX as f32) as u16)
    }
}
