//! NIfTI-1 single-file volumes (`.nii`), uncompressed.

use super::{ImageMeta, ImageStack, IngestError, Result, SliceSeries};
use crate::image::Image;

const HEADER_LEN: usize = 348;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            other => return Err(IngestError::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// A decoded volume in `[slice][frame][row][col]` order.
///
/// NIfTI's first axis (i, fastest varying) becomes the column, the second the
/// row, the third the slice and the fourth the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub slices: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    /// Column, row and slice spacing in mm (pixdim[1..=3]).
    pub spacing: [f64; 3],
    pub datatype: NiftiDatatype,
    pub data: Vec<f32>,
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }

    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.bytes(at))
    }

    fn sample(&self, dt: NiftiDatatype, at: usize) -> f64 {
        match dt {
            NiftiDatatype::U8 => self.buf[at] as f64,
            NiftiDatatype::I8 => self.buf[at] as i8 as f64,
            NiftiDatatype::I16 => self.i16(at) as f64,
            NiftiDatatype::U16 => u16::from_le_bytes(self.bytes(at)) as f64,
            NiftiDatatype::I32 => self.i32(at) as f64,
            NiftiDatatype::U32 => u32::from_le_bytes(self.bytes(at)) as f64,
            NiftiDatatype::F32 => self.f32(at) as f64,
            NiftiDatatype::F64 => self.f64(at),
        }
    }
}

/// Parses a NIfTI-1 file held in memory.
///
/// For `n+1` files the voxels start at `vox_offset`; for `ni1` headers the
/// companion image bytes are expected to follow the 348-byte header directly.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_LEN {
        return Err(IngestError::HeaderDimMismatch(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    let single_file = match &magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(IngestError::BadMagic(magic)),
    };
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => {
            return Err(IngestError::HeaderDimMismatch(format!(
                "sizeof_hdr is {n}, expected 348"
            )))
        }
    };
    let rd = Reader {
        buf: bytes,
        big_endian,
    };

    let dim: Vec<i16> = (0..8).map(|i| rd.i16(40 + 2 * i)).collect();
    let rank = dim[0];
    if rank != 3 && rank != 4 {
        return Err(IngestError::HeaderDimMismatch(format!(
            "dim[0] = {rank}, expected 3 or 4"
        )));
    }
    if let Some(bad) = dim[1..=rank as usize].iter().find(|&&d| d < 1) {
        return Err(IngestError::HeaderDimMismatch(format!(
            "non-positive dimension {bad} in {:?}",
            &dim[..=rank as usize]
        )));
    }
    let cols = dim[1] as usize;
    let rows = dim[2] as usize;
    let slices = dim[3] as usize;
    let frames = if rank == 4 { dim[4] as usize } else { 1 };

    let datatype = NiftiDatatype::from_code(rd.i16(70))?;
    let bitpix = rd.i16(72);
    if bitpix as usize != datatype.bytes() * 8 {
        return Err(IngestError::HeaderDimMismatch(format!(
            "bitpix {bitpix} disagrees with datatype {datatype:?}"
        )));
    }
    let pixdim: Vec<f32> = (0..8).map(|i| rd.f32(76 + 4 * i)).collect();
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];

    let offset = if single_file {
        let vox_offset = rd.f32(108);
        if !(vox_offset >= HEADER_LEN as f32) {
            return Err(IngestError::HeaderDimMismatch(format!(
                "vox_offset {vox_offset} lies inside the header"
            )));
        }
        vox_offset as usize
    } else {
        HEADER_LEN
    };
    let count = cols * rows * slices * frames;
    let needed = offset + count * datatype.bytes();
    if bytes.len() < needed {
        return Err(IngestError::HeaderDimMismatch(format!(
            "header describes {count} voxels ({needed} bytes) but file has {} bytes",
            bytes.len()
        )));
    }

    let slope = rd.f32(112) as f64;
    let inter = rd.f32(116) as f64;
    let scale = |v: f64| if slope != 0.0 { v * slope + inter } else { v };

    let step = datatype.bytes();
    let mut data = vec![0f32; count];
    // NIfTI order is x fastest, then y, z, t.
    for t in 0..frames {
        for z in 0..slices {
            for y in 0..rows {
                for x in 0..cols {
                    let src = ((t * slices + z) * rows + y) * cols + x;
                    let dst = ((z * frames + t) * rows + y) * cols + x;
                    data[dst] = scale(rd.sample(datatype, offset + src * step)) as f32;
                }
            }
        }
    }
    Ok(NiftiVolume {
        slices,
        frames,
        rows,
        cols,
        spacing,
        datatype,
        data,
    })
}

impl NiftiVolume {
    pub fn frame(&self, slice: usize, frame: usize) -> Image<f32> {
        let n = self.rows * self.cols;
        let start = (slice * self.frames + frame) * n;
        Image::from_vec(self.rows, self.cols, self.data[start..start + n].to_vec())
    }

    /// Converts to a canonical stack. Intensities are rounded and clamped to
    /// `u16`; geometry is synthesised as axis-aligned slices spaced by the
    /// slice thickness, since NIfTI-1 headers carry no per-slice IPP.
    pub fn to_stack(&self, patient_id: &str) -> Result<ImageStack> {
        let slices = (0..self.slices)
            .map(|s| {
                let mut meta = ImageMeta::axial(
                    self.rows,
                    self.cols,
                    self.spacing[1],
                    s as f64 * self.spacing[2],
                );
                meta.pixel_spacing_col = self.spacing[0];
                SliceSeries {
                    frames: (0..self.frames)
                        .map(|f| self.frame(s, f).to_u16_saturating())
                        .collect(),
                    meta: vec![meta; self.frames],
                }
            })
            .collect();
        ImageStack::new(patient_id, slices)
    }
}

/// Writes NIfTI-1 single files; the inverse of [`parse_nifti`].
#[derive(Clone, Debug)]
pub struct NiftiWriter {
    pub datatype: NiftiDatatype,
    /// Emit a 3-D header when the volume has a single frame.
    pub collapse_single_frame: bool,
}

impl NiftiWriter {
    pub fn new(datatype: NiftiDatatype) -> Self {
        NiftiWriter {
            datatype,
            collapse_single_frame: true,
        }
    }

    pub fn write(&self, vol: &NiftiVolume) -> Vec<u8> {
        let mut h = vec![0u8; HEADER_LEN];
        let put_i16 =
            |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 =
            |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let rank: i16 = if vol.frames == 1 && self.collapse_single_frame {
            3
        } else {
            4
        };
        let dims = [
            rank,
            vol.cols as i16,
            vol.rows as i16,
            vol.slices as i16,
            if rank == 4 { vol.frames as i16 } else { 1 },
            1,
            1,
            1,
        ];
        for (i, d) in dims.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d);
        }
        put_i16(&mut h, 70, self.datatype.code());
        put_i16(&mut h, 72, (self.datatype.bytes() * 8) as i16);
        let pixdim = [
            1.0,
            vol.spacing[0] as f32,
            vol.spacing[1] as f32,
            vol.spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ];
        for (i, p) in pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * i, *p);
        }
        put_f32(&mut h, 108, 352.0);
        put_f32(&mut h, 112, 1.0);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&[0; 4]);

        for t in 0..vol.frames {
            for z in 0..vol.slices {
                for y in 0..vol.rows {
                    for x in 0..vol.cols {
                        let v = vol.data[((z * vol.frames + t) * vol.rows + y) * vol.cols + x];
                        self.push_sample(&mut h, v as f64);
                    }
                }
            }
        }
        h
    }

    fn push_sample(&self, out: &mut Vec<u8>, v: f64) {
        match self.datatype {
            NiftiDatatype::U8 => out.push(v as u8),
            NiftiDatatype::I8 => out.push(v as i8 as u8),
            NiftiDatatype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            NiftiDatatype::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            NiftiDatatype::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            NiftiDatatype::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            NiftiDatatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            NiftiDatatype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(slices: usize, frames: usize, rows: usize, cols: usize) -> NiftiVolume {
        let n = slices * frames * rows * cols;
        NiftiVolume {
            slices,
            frames,
            rows,
            cols,
            spacing: [1.25, 1.5, 10.0],
            datatype: NiftiDatatype::I16,
            data: (0..n).map(|i| (i % 3000) as f32).collect(),
        }
    }

    #[test]
    fn four_d_round_trip_keeps_axis_order() {
        let vol = volume(3, 20, 8, 8);
        let bytes = NiftiWriter::new(NiftiDatatype::I16).write(&vol);
        let got = parse_nifti(&bytes).unwrap();
        assert_eq!((got.slices, got.frames, got.rows, got.cols), (3, 20, 8, 8));
        assert_eq!(got.spacing, [1.25, 1.5, 10.0]);
        assert_eq!(got.data, vol.data);
    }

    #[test]
    fn voxel_order_matches_header_axes() {
        // Hand-built: dim = (4, 2, 3, 1, 2), voxel value = its file index.
        let mut vol = volume(1, 2, 3, 2);
        vol.data = vec![0.0; 12];
        let mut bytes = NiftiWriter::new(NiftiDatatype::I16).write(&vol);
        for i in 0..12i16 {
            let at = 352 + 2 * i as usize;
            bytes[at..at + 2].copy_from_slice(&i.to_le_bytes());
        }
        let got = parse_nifti(&bytes).unwrap();
        // x fastest: file index = x + 2*(y + 3*t)
        assert_eq!(got.frame(0, 0).get(1, 0), 2.0);
        assert_eq!(got.frame(0, 0).get(2, 1), 5.0);
        assert_eq!(got.frame(0, 1).get(0, 1), 7.0);
    }

    #[test]
    fn three_d_file_has_one_frame() {
        let vol = volume(5, 1, 4, 6);
        let bytes = NiftiWriter::new(NiftiDatatype::U16).write(&vol);
        assert_eq!(i16::from_le_bytes([bytes[40], bytes[41]]), 3);
        let got = parse_nifti(&bytes).unwrap();
        assert_eq!(got.frames, 1);
        assert_eq!(got.data, vol.data);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = NiftiWriter::new(NiftiDatatype::I16).write(&volume(1, 1, 2, 2));
        bytes[344..348].copy_from_slice(b"bad\0");
        assert!(matches!(parse_nifti(&bytes), Err(IngestError::BadMagic(m)) if &m == b"bad\0"));
    }

    #[test]
    fn unsupported_datatype_and_dims() {
        let good = NiftiWriter::new(NiftiDatatype::I16).write(&volume(1, 1, 2, 2));
        let mut bytes = good.clone();
        bytes[70..72].copy_from_slice(&32i16.to_le_bytes()); // complex64
        assert!(matches!(
            parse_nifti(&bytes),
            Err(IngestError::UnsupportedDatatype(32))
        ));
        let mut bytes = good.clone();
        bytes[40..42].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(
            parse_nifti(&bytes),
            Err(IngestError::HeaderDimMismatch(_))
        ));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            parse_nifti(truncated),
            Err(IngestError::HeaderDimMismatch(_))
        ));
    }

    #[test]
    fn scaling_is_applied() {
        let vol = volume(1, 1, 2, 2);
        let mut bytes = NiftiWriter::new(NiftiDatatype::I16).write(&vol);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let got = parse_nifti(&bytes).unwrap();
        let expect: Vec<f32> = vol.data.iter().map(|v| v * 2.0 + 1.0).collect();
        assert_eq!(got.data, expect);
    }

    #[test]
    fn big_endian_header_is_read() {
        let vol = volume(1, 1, 2, 2);
        let le = NiftiWriter::new(NiftiDatatype::I16).write(&vol);
        let mut be = le.clone();
        let swap = |b: &mut Vec<u8>, at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
            swap(&mut be, 76 + 4 * i, 4);
        }
        swap(&mut be, 70, 2);
        swap(&mut be, 72, 2);
        swap(&mut be, 108, 4);
        swap(&mut be, 112, 4);
        for i in 0..4 {
            swap(&mut be, 352 + 2 * i, 2);
        }
        assert_eq!(parse_nifti(&be).unwrap(), parse_nifti(&le).unwrap());
    }
}
