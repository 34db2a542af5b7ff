//! Left-ventricle analysis for cardiac short-axis MRI.
//!
//! The crate follows the data through the pipeline:
//!
//! * [`ingest`] decodes DICOM / NIfTI-1 inputs and stores studies canonically,
//! * [`imgproc`] normalizes geometry and contrast,
//! * [`roi`] localizes the ventricle from cardiac motion,
//! * [`unet`] segments the blood pool,
//! * [`postproc`] removes spurious predicted contours,
//! * [`volume`] turns masks into ESV / EDV / EF,
//! * [`eval`] scores predictions and writes reports.

pub mod eval;
pub mod image;
pub mod imgproc;
pub mod ingest;
pub mod postproc;
pub mod roi;
pub mod unet;
pub mod volume;

pub use image::{Image, Mask};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/roi.md")]
    mod roi {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/postprocessing.md")]
    mod postprocessing {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
