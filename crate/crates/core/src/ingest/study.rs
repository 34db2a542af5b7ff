//! Canonical on-disk study layout.
//!
//! A study directory holds `manifest.json` plus one raw pixel file per slice
//! (`slice_NNN.raw`: frames x rows x cols little-endian `u16`, row-major,
//! frame-major) and optional per-frame mask files (`slice_NNN_frame_MMM.mask`:
//! rows x cols bytes, each 0 or 1).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageMeta, ImageStack, IngestError, MaskGrid, Result, SliceSeries};
use crate::image::Image;

pub const PIXEL_ENCODING: &str = "uint16-le-row-major";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub format_version: u32,
    pub patient_id: String,
    pub pixel_encoding: String,
    pub slices: Vec<SliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    pub pixel_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_files: Option<Vec<Option<String>>>,
    pub meta: Vec<ImageMeta>,
}

/// Writes `stack` (and optional masks) under `dir`, creating it if needed.
pub fn store_study(
    stack: &ImageStack,
    masks: Option<&MaskGrid>,
    dir: &Path,
) -> Result<StudyManifest> {
    stack.validate()?;
    if let Some(masks) = masks {
        check_masks(stack, masks)?;
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(stack.slices.len());
    for (s, slice) in stack.slices.iter().enumerate() {
        let pixel_file = format!("slice_{s:03}.raw");
        let mut bytes = Vec::with_capacity(slice.frames.len() * slice.rows() * slice.cols() * 2);
        for frame in &slice.frames {
            bytes.extend(frame.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        fs::write(dir.join(&pixel_file), &bytes)?;

        let mask_files = match masks {
            Some(masks) => {
                let mut names = Vec::with_capacity(slice.frames.len());
                for (f, mask) in masks[s].iter().enumerate() {
                    names.push(match mask {
                        Some(m) => {
                            let name = format!("slice_{s:03}_frame_{f:03}.mask");
                            fs::write(dir.join(&name), m.data())?;
                            Some(name)
                        }
                        None => None,
                    });
                }
                Some(names)
            }
            None => None,
        };
        entries.push(SliceEntry {
            rows: slice.rows(),
            cols: slice.cols(),
            frames: slice.frames.len(),
            pixel_file,
            mask_files,
            meta: slice.meta.clone(),
        });
    }
    let manifest = StudyManifest {
        format_version: FORMAT_VERSION,
        patient_id: stack.patient_id.clone(),
        pixel_encoding: PIXEL_ENCODING.to_string(),
        slices: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn check_masks(stack: &ImageStack, masks: &MaskGrid) -> Result<()> {
    if masks.len() != stack.slices.len() {
        return Err(IngestError::ShapeMismatch(format!(
            "{} mask slices for {} image slices",
            masks.len(),
            stack.slices.len()
        )));
    }
    for (s, (slice, row)) in stack.slices.iter().zip(masks).enumerate() {
        if row.len() != slice.frames.len() {
            return Err(IngestError::ShapeMismatch(format!(
                "slice {s}: {} masks for {} frames",
                row.len(),
                slice.frames.len()
            )));
        }
        for m in row.iter().flatten() {
            if m.shape() != (slice.rows(), slice.cols()) || !m.is_binary() {
                return Err(IngestError::ShapeMismatch(format!(
                    "slice {s}: mask must be a binary {}x{} image",
                    slice.rows(),
                    slice.cols()
                )));
            }
        }
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<StudyManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IngestError::MissingFile(path))
        }
        Err(e) => return Err(e.into()),
    };
    let manifest: StudyManifest = serde_json::from_slice(&text)?;
    if manifest.pixel_encoding != PIXEL_ENCODING {
        return Err(IngestError::ManifestMismatch(format!(
            "unknown pixel encoding {:?}",
            manifest.pixel_encoding
        )));
    }
    Ok(manifest)
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(IngestError::MissingFile(path)),
        Err(e) => Err(e.into()),
    }
}

/// Reads a study written by [`store_study`].
pub fn load_study(dir: &Path) -> Result<ImageStack> {
    let manifest = read_manifest(dir)?;
    let mut slices = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let bytes = read_file(dir, &entry.pixel_file)?;
        let plane = entry.rows * entry.cols;
        let expected = plane * 2 * entry.frames;
        if bytes.len() != expected {
            return Err(IngestError::ManifestMismatch(format!(
                "{} has {} bytes, manifest implies {expected}",
                entry.pixel_file,
                bytes.len()
            )));
        }
        if entry.meta.len() != entry.frames {
            return Err(IngestError::ManifestMismatch(format!(
                "{} frames but {} metadata records",
                entry.frames,
                entry.meta.len()
            )));
        }
        let frames = bytes
            .chunks_exact(plane * 2)
            .map(|chunk| {
                let px = chunk
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect();
                Image::from_vec(entry.rows, entry.cols, px)
            })
            .collect();
        slices.push(SliceSeries {
            frames,
            meta: entry.meta.clone(),
        });
    }
    ImageStack::new(manifest.patient_id, slices)
}

/// Reads the masks stored alongside a study, if any were written.
pub fn load_masks(dir: &Path) -> Result<Option<MaskGrid>> {
    let manifest = read_manifest(dir)?;
    if manifest.slices.iter().all(|e| e.mask_files.is_none()) {
        return Ok(None);
    }
    let mut grid = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let names = entry
            .mask_files
            .clone()
            .unwrap_or_else(|| vec![None; entry.frames]);
        let mut row = Vec::with_capacity(names.len());
        for name in names {
            row.push(match name {
                Some(name) => {
                    let bytes = read_file(dir, &name)?;
                    if bytes.len() != entry.rows * entry.cols || bytes.iter().any(|&b| b > 1) {
                        return Err(IngestError::ManifestMismatch(format!(
                            "{name} is not a binary {}x{} mask",
                            entry.rows, entry.cols
                        )));
                    }
                    Some(Image::from_vec(entry.rows, entry.cols, bytes))
                }
                None => None,
            });
        }
        grid.push(row);
    }
    Ok(Some(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(slices: usize, frames: usize) -> ImageStack {
        let slices = (0..slices)
            .map(|s| SliceSeries {
                frames: (0..frames)
                    .map(|f| Image::from_fn(3, 4, |r, c| (s * 1000 + f * 100 + r * 4 + c) as u16))
                    .collect(),
                meta: vec![ImageMeta::axial(3, 4, 1.25, s as f64 * 8.0); frames],
            })
            .collect();
        ImageStack::new("p01", slices).unwrap()
    }

    #[test]
    fn manifest_lists_slices_and_frames() {
        let dir = tempfile::tempdir().unwrap();
        let m = store_study(&stack(2, 3), None, dir.path()).unwrap();
        assert_eq!(m.slices.len(), 2);
        assert!(m.slices.iter().all(|s| s.frames == 3));
        assert_eq!(load_study(dir.path()).unwrap(), stack(2, 3));
        assert_eq!(load_masks(dir.path()).unwrap(), None);
    }

    #[test]
    fn truncated_pixel_file() {
        let dir = tempfile::tempdir().unwrap();
        store_study(&stack(1, 2), None, dir.path()).unwrap();
        let path = dir.path().join("slice_000.raw");
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_study(dir.path()),
            Err(IngestError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn empty_dir_and_missing_pixels() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_study(dir.path()),
            Err(IngestError::MissingFile(_))
        ));
        store_study(&stack(1, 1), None, dir.path()).unwrap();
        fs::remove_file(dir.path().join("slice_000.raw")).unwrap();
        assert!(matches!(
            load_study(dir.path()),
            Err(IngestError::MissingFile(_))
        ));
    }

    #[test]
    fn unwritable_target() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(
            store_study(&stack(1, 1), None, &file.join("study")),
            Err(IngestError::Io(_))
        ));
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let st = stack(2, 2);
        let mask = Image::from_fn(3, 4, |r, c| u8::from(r == c));
        let grid: MaskGrid = vec![vec![Some(mask.clone()), None], vec![None, Some(mask)]];
        store_study(&st, Some(&grid), dir.path()).unwrap();
        assert_eq!(load_masks(dir.path()).unwrap(), Some(grid));
    }
}
