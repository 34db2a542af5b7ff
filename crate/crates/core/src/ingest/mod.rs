//! Reading raw study data: DICOM and NIfTI-1 decoding, contour rasterization,
//! and the canonical on-disk study format.

mod contour;
mod dicom;
mod nifti;
mod study;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask};

pub use contour::{parse_contour_text, rasterize_contour, simplify_acdc_label};
pub use dicom::{parse_dicom, read_elements, DicomBuilder, DicomElement, Tag, EXPLICIT_VR_LE};
pub use nifti::{parse_nifti, NiftiDatatype, NiftiVolume, NiftiWriter};
pub use study::{load_masks, load_study, store_study, SliceEntry, StudyManifest, PIXEL_ENCODING};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("required tag {0} is missing")]
    MissingTag(Tag),
    #[error("unsupported transfer syntax {0:?}")]
    UnsupportedTransferSyntax(String),
    #[error("pixel data truncated: expected {expected} bytes, found {actual}")]
    TruncatedPixelData { expected: usize, actual: usize },
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
    #[error("invalid value {value:?} for tag {tag}")]
    InvalidValue { tag: Tag, value: String },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid image metadata: {0}")]
    InvalidMeta(String),
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("NIfTI header dimension mismatch: {0}")]
    HeaderDimMismatch(String),
    #[error("polygon needs at least 3 points, got {0}")]
    DegeneratePolygon(usize),
    #[error("contour text line {line}: {reason}")]
    ContourSyntax { line: usize, reason: String },
    #[error("inconsistent image stack: {0}")]
    ShapeMismatch(String),
    #[error("manifest does not match pixel files: {0}")]
    ManifestMismatch(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest encoding: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PhaseEncoding {
    Row,
    Col,
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Sex {
    M,
    F,
    #[default]
    Unknown,
}

/// Acquisition metadata for one 2-D image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    /// Distance between adjacent rows, mm (first PixelSpacing value).
    pub pixel_spacing_row: f64,
    /// Distance between adjacent columns, mm.
    pub pixel_spacing_col: f64,
    pub rows: usize,
    pub cols: usize,
    /// Patient coordinates of the upper-left pixel centre, mm.
    pub ipp: [f64; 3],
    /// Row direction cosines followed by column direction cosines.
    pub iop: [f64; 6],
    pub phase_encoding: PhaseEncoding,
    /// The SliceLocation tag as written by the scanner. Not used for geometry.
    pub slice_location_raw: Option<f64>,
    pub acquisition_index: u32,
    pub patient_age: Option<u32>,
    pub patient_sex: Sex,
}

impl ImageMeta {
    /// Axis-aligned metadata with unit direction cosines and no demographics.
    pub fn axial(rows: usize, cols: usize, spacing: f64, z: f64) -> Self {
        ImageMeta {
            pixel_spacing_row: spacing,
            pixel_spacing_col: spacing,
            rows,
            cols,
            ipp: [0.0, 0.0, z],
            iop: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            phase_encoding: PhaseEncoding::Unknown,
            slice_location_raw: None,
            acquisition_index: 0,
            patient_age: None,
            patient_sex: Sex::Unknown,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_spacing_row > 0.0 && self.pixel_spacing_col > 0.0) {
            return Err(IngestError::InvalidMeta(format!(
                "pixel spacing must be positive, got ({}, {})",
                self.pixel_spacing_row, self.pixel_spacing_col
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(IngestError::InvalidMeta("zero-sized image".into()));
        }
        if !iop_is_unit(&self.iop) {
            return Err(IngestError::InvalidMeta(format!(
                "orientation cosines are not unit vectors: {:?}",
                self.iop
            )));
        }
        Ok(())
    }
}

/// True when both 3-component halves of `iop` have norm within 1e-3 of one.
pub fn iop_is_unit(iop: &[f64; 6]) -> bool {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm(&iop[..3]) - 1.0).abs() <= 1e-3 && (norm(&iop[3..]) - 1.0).abs() <= 1e-3
}

/// All frames of one spatial slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSeries {
    pub frames: Vec<Image<u16>>,
    pub meta: Vec<ImageMeta>,
}

impl SliceSeries {
    pub fn rows(&self) -> usize {
        self.frames.first().map_or(0, Image::rows)
    }

    pub fn cols(&self) -> usize {
        self.frames.first().map_or(0, Image::cols)
    }
}

/// One patient record: slices x frames of 2-D images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub patient_id: String,
    pub slices: Vec<SliceSeries>,
}

impl ImageStack {
    pub fn new(patient_id: impl Into<String>, slices: Vec<SliceSeries>) -> Result<Self> {
        let stack = ImageStack {
            patient_id: patient_id.into(),
            slices,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(IngestError::ShapeMismatch("stack has no slices".into()));
        }
        for (s, slice) in self.slices.iter().enumerate() {
            if slice.frames.is_empty() {
                return Err(IngestError::ShapeMismatch(format!(
                    "slice {s} has no frames"
                )));
            }
            if slice.meta.len() != slice.frames.len() {
                return Err(IngestError::ShapeMismatch(format!(
                    "slice {s}: {} frames but {} metadata records",
                    slice.frames.len(),
                    slice.meta.len()
                )));
            }
            let shape = slice.frames[0].shape();
            for (f, (frame, meta)) in slice.frames.iter().zip(&slice.meta).enumerate() {
                if frame.shape() != shape {
                    return Err(IngestError::ShapeMismatch(format!(
                        "slice {s} frame {f} is {:?}, expected {shape:?}",
                        frame.shape()
                    )));
                }
                if (meta.rows, meta.cols) != shape {
                    return Err(IngestError::ShapeMismatch(format!(
                        "slice {s} frame {f} metadata says {}x{}",
                        meta.rows, meta.cols
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_frames(&self) -> usize {
        self.slices
            .iter()
            .map(|s| s.frames.len())
            .max()
            .unwrap_or(0)
    }
}

/// Where a mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    GroundTruth,
    Predicted,
}

/// A binary left-ventricle mask aligned with an image; 1 marks the blood pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourMask {
    pub mask: Mask,
    pub source: MaskSource,
}

/// Optional per-(slice, frame) masks for a study.
pub type MaskGrid = Vec<Vec<Option<Mask>>>;
