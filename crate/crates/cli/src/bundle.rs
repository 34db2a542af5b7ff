//! Per-patient interchange between pipeline stages.
//!
//! A bundle directory holds `bundle.json`, optionally `images.f32` (slices x
//! frames x rows x cols, little-endian) and optionally `masks.u8` (same
//! layout, one byte per pixel). `mask_present` marks which frames carry a
//! mask; absent frames are stored as zeros.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lvseg::ingest::Sex;
use lvseg::volume::SliceMasks;
use lvseg::{Image, Mask};
use serde::{Deserialize, Serialize};

use crate::DataError;

pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGeom {
    pub frames: usize,
    pub ipp: [f64; 3],
    pub iop: [f64; 6],
    pub acquisition_index: u32,
    /// Side of one pixel of the stored arrays, mm.
    pub pixel_spacing_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub patient_id: String,
    pub rows: usize,
    pub cols: usize,
    pub age: Option<u32>,
    pub sex: Sex,
    pub slices: Vec<SliceGeom>,
    pub has_images: bool,
    pub mask_present: Option<Vec<Vec<bool>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub header: Header,
    /// `[slice][frame]`
    pub images: Option<Vec<Vec<Image<f32>>>>,
    pub masks: Option<Vec<Vec<Option<Mask>>>>,
}

impl Bundle {
    pub fn patient_id(&self) -> &str {
        &self.header.patient_id
    }

    /// Same geometry with the given masks and no images.
    pub fn with_masks(&self, masks: Vec<Vec<Option<Mask>>>) -> Bundle {
        Bundle {
            header: self.header.clone(),
            images: None,
            masks: Some(masks),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut header = self.header.clone();
        header.has_images = self.images.is_some();
        header.mask_present = self.masks.as_ref().map(|m| {
            m.iter()
                .map(|s| s.iter().map(Option::is_some).collect())
                .collect()
        });
        if let Some(images) = &self.images {
            let bytes: Vec<u8> = images
                .iter()
                .flatten()
                .flat_map(|im| im.data().iter().flat_map(|v| v.to_le_bytes()))
                .collect();
            fs::write(dir.join("images.f32"), bytes)?;
        }
        if let Some(masks) = &self.masks {
            let plane = header.rows * header.cols;
            let mut bytes = Vec::new();
            for m in masks.iter().flatten() {
                match m {
                    Some(m) => bytes.extend_from_slice(m.data()),
                    None => bytes.resize(bytes.len() + plane, 0),
                }
            }
            fs::write(dir.join("masks.u8"), bytes)?;
        }
        let json = serde_json::to_string_pretty(&header)? + "\n";
        fs::write(dir.join(BUNDLE_FILE), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Bundle> {
        let path = dir.join(BUNDLE_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let header: Header =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let plane = header.rows * header.cols;
        let frames: usize = header.slices.iter().map(|s| s.frames).sum();
        let images = if header.has_images {
            let bytes = fs::read(dir.join("images.f32"))?;
            if bytes.len() != frames * plane * 4 {
                return Err(DataError(format!(
                    "{}: images.f32 has {} bytes, expected {}",
                    dir.display(),
                    bytes.len(),
                    frames * plane * 4
                ))
                .into());
            }
            let flat = bytes
                .chunks_exact(plane * 4)
                .map(|c| {
                    Image::from_vec(
                        header.rows,
                        header.cols,
                        c.chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                            .collect(),
                    )
                })
                .collect();
            Some(split(&header, flat))
        } else {
            None
        };
        let masks = match &header.mask_present {
            Some(present) => {
                let bytes = fs::read(dir.join("masks.u8"))?;
                if bytes.len() != frames * plane || bytes.iter().any(|&b| b > 1) {
                    return Err(DataError(format!(
                        "{}: masks.u8 is not {frames} binary {}x{} masks",
                        dir.display(),
                        header.rows,
                        header.cols
                    ))
                    .into());
                }
                let flat = bytes
                    .chunks_exact(plane)
                    .map(|c| Image::from_vec(header.rows, header.cols, c.to_vec()))
                    .collect();
                let grid = split(&header, flat);
                Some(
                    grid.into_iter()
                        .zip(present)
                        .map(|(s, p)| {
                            s.into_iter()
                                .zip(p)
                                .map(|(m, &keep)| keep.then_some(m))
                                .collect()
                        })
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Bundle {
            header,
            images,
            masks,
        })
    }

    /// Mask geometry for volumetry; frames without a mask are skipped.
    pub fn slice_masks(&self) -> anyhow::Result<Vec<SliceMasks>> {
        let Some(masks) = &self.masks else {
            return Err(DataError(format!("bundle for {} has no masks", self.patient_id())).into());
        };
        Ok(self
            .header
            .slices
            .iter()
            .zip(masks)
            .map(|(g, m)| SliceMasks {
                masks: m.iter().flatten().cloned().collect(),
                ipp: g.ipp,
                iop: g.iop,
                acquisition_index: g.acquisition_index,
                pixel_spacing_mm: g.pixel_spacing_mm,
            })
            .collect())
    }
}

fn split<T>(header: &Header, flat: Vec<T>) -> Vec<Vec<T>> {
    let mut it = flat.into_iter();
    header
        .slices
        .iter()
        .map(|s| it.by_ref().take(s.frames).collect())
        .collect()
}

/// Bundle directories directly under `root`, sorted by name.
pub fn list_bundles(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry?.path();
        if path.join(BUNDLE_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError(format!("no bundles under {}", root.display())).into());
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let geom = SliceGeom {
            frames: 2,
            ipp: [1.0, 2.0, 3.0],
            iop: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            acquisition_index: 4,
            pixel_spacing_mm: 1.0,
        };
        let b = Bundle {
            header: Header {
                patient_id: "p".into(),
                rows: 2,
                cols: 3,
                age: Some(40),
                sex: Sex::F,
                slices: vec![geom.clone(), geom],
                has_images: true,
                mask_present: Some(vec![vec![true, false], vec![false, true]]),
            },
            images: Some(vec![
                vec![
                    Image::from_fn(2, 3, |r, c| (r * 3 + c) as f32
                        * 0.1);
                    2
                ];
                2
            ]),
            masks: Some(vec![
                vec![Some(Image::from_fn(2, 3, |r, _| r as u8)), None],
                vec![None, Some(Image::filled(2, 3, 1))],
            ]),
        };
        b.write(dir.path()).unwrap();
        assert_eq!(Bundle::read(dir.path()).unwrap(), b);
        let sm = b.slice_masks().unwrap();
        assert_eq!(sm[0].masks.len(), 1);
    }
}
