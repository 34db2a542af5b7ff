//! A deliberately small DICOM Part 10 reader and writer.
//!
//! Only explicit VR little endian, uncompressed, single-frame, 16-bit
//! unsigned monochrome images are accepted. Everything else is an error.

use std::collections::BTreeMap;
use std::fmt;

use super::{ImageMeta, IngestError, PhaseEncoding, Result, Sex};
use crate::image::Image;

/// Transfer syntax UID for explicit VR little endian.
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

const PREAMBLE_LEN: usize = 128;
const UNDEFINED_LEN: u32 = 0xFFFF_FFFF;

/// A (group, element) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

impl Tag {
    pub const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
    pub const PATIENT_SEX: Tag = Tag(0x0010, 0x0040);
    pub const PATIENT_AGE: Tag = Tag(0x0010, 0x1010);
    pub const PHASE_ENCODING: Tag = Tag(0x0018, 0x1312);
    pub const SERIES_NUMBER: Tag = Tag(0x0020, 0x0011);
    pub const ACQUISITION_NUMBER: Tag = Tag(0x0020, 0x0012);
    pub const IMAGE_POSITION: Tag = Tag(0x0020, 0x0032);
    pub const IMAGE_ORIENTATION: Tag = Tag(0x0020, 0x0037);
    pub const SLICE_LOCATION: Tag = Tag(0x0020, 0x1041);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    const ITEM: Tag = Tag(0xFFFE, 0xE000);
    const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
    const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);
}

/// One decoded data element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DicomElement {
    pub vr: [u8; 2],
    pub value: Vec<u8>,
}

impl DicomElement {
    /// The value as text with DICOM padding (trailing spaces / NULs) removed.
    pub fn as_str(&self) -> String {
        String::from_utf8_lossy(&self.value)
            .trim_end_matches(['\0', ' '])
            .trim_start()
            .to_string()
    }
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(IngestError::Malformed(format!(
                "unexpected end of data at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag> {
        Ok(Tag(self.u16()?, self.u16()?))
    }

    /// Reads an explicit-VR element header. Returns tag, VR and declared length.
    fn header(&mut self) -> Result<(Tag, [u8; 2], u32)> {
        let tag = self.tag()?;
        if tag.0 == 0xFFFE {
            // Item and delimiter tags carry no VR.
            return Ok((tag, *b"  ", self.u32()?));
        }
        let vr_bytes = self.take(2)?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        let len = if has_long_length(&vr) {
            self.take(2)?;
            self.u32()?
        } else {
            u32::from(self.u16()?)
        };
        Ok((tag, vr, len))
    }

    /// Skips the body of an undefined-length sequence, up to and including
    /// its delimiter.
    fn skip_undefined_sequence(&mut self) -> Result<()> {
        loop {
            let (tag, _, len) = self.header()?;
            match tag {
                Tag::SEQUENCE_DELIMITER => return Ok(()),
                Tag::ITEM if len == UNDEFINED_LEN => self.skip_undefined_item()?,
                Tag::ITEM => {
                    self.take(len as usize)?;
                }
                other => {
                    return Err(IngestError::Malformed(format!(
                        "unexpected tag {other} inside sequence"
                    )))
                }
            }
        }
    }

    fn skip_undefined_item(&mut self) -> Result<()> {
        loop {
            let (tag, vr, len) = self.header()?;
            if tag == Tag::ITEM_DELIMITER {
                return Ok(());
            }
            if len == UNDEFINED_LEN {
                if &vr != b"SQ" {
                    return Err(IngestError::Malformed(format!(
                        "undefined length on non-sequence element {tag}"
                    )));
                }
                self.skip_undefined_sequence()?;
            } else {
                self.take(len as usize)?;
            }
        }
    }
}

/// Decodes every top-level element of a DICOM Part 10 file, file meta
/// group included. Sequence contents are skipped.
pub fn read_elements(bytes: &[u8]) -> Result<BTreeMap<Tag, DicomElement>> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != b"DICM" {
        return Err(IngestError::Malformed("missing DICM prefix".into()));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: PREAMBLE_LEN + 4,
    };
    let mut elements = BTreeMap::new();
    let mut syntax_checked = false;
    while cur.remaining() > 0 {
        let start = cur.pos;
        let (tag, vr, len) = cur.header()?;
        if !syntax_checked && tag.0 != 0x0002 {
            // The file meta group is always explicit VR LE; the rest of the
            // file follows the declared transfer syntax.
            let ts = elements
                .get(&Tag::TRANSFER_SYNTAX)
                .map(DicomElement::as_str)
                .ok_or(IngestError::MissingTag(Tag::TRANSFER_SYNTAX))?;
            if ts != EXPLICIT_VR_LE {
                return Err(IngestError::UnsupportedTransferSyntax(ts));
            }
            syntax_checked = true;
        }
        if len == UNDEFINED_LEN {
            if tag == Tag::PIXEL_DATA {
                return Err(IngestError::UnsupportedPixelFormat(
                    "encapsulated pixel data".into(),
                ));
            }
            if &vr != b"SQ" {
                return Err(IngestError::Malformed(format!(
                    "undefined length on {tag} at offset {start}"
                )));
            }
            cur.skip_undefined_sequence()?;
            continue;
        }
        let len = len as usize;
        if len > cur.remaining() {
            if tag == Tag::PIXEL_DATA {
                return Err(IngestError::TruncatedPixelData {
                    expected: len,
                    actual: cur.remaining(),
                });
            }
            return Err(IngestError::Malformed(format!(
                "element {tag} claims {len} bytes but only {} remain",
                cur.remaining()
            )));
        }
        let value = cur.take(len)?;
        if &vr != b"SQ" {
            elements.insert(
                tag,
                DicomElement {
                    vr,
                    value: value.to_vec(),
                },
            );
        }
    }
    if !syntax_checked {
        // A file holding only the meta group still has to declare its syntax.
        let ts = elements
            .get(&Tag::TRANSFER_SYNTAX)
            .map(DicomElement::as_str)
            .ok_or(IngestError::MissingTag(Tag::TRANSFER_SYNTAX))?;
        if ts != EXPLICIT_VR_LE {
            return Err(IngestError::UnsupportedTransferSyntax(ts));
        }
    }
    Ok(elements)
}

fn required(el: &BTreeMap<Tag, DicomElement>, tag: Tag) -> Result<&DicomElement> {
    el.get(&tag).ok_or(IngestError::MissingTag(tag))
}

fn invalid(tag: Tag, value: impl Into<String>) -> IngestError {
    IngestError::InvalidValue {
        tag,
        value: value.into(),
    }
}

fn us_value(el: &DicomElement, tag: Tag) -> Result<u16> {
    match el.value.as_slice() {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(invalid(tag, format!("{:?}", el.value))),
    }
}

fn decimals(el: &DicomElement, tag: Tag) -> Result<Vec<f64>> {
    let text = el.as_str();
    text.split('\\')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| invalid(tag, text.clone()))
        })
        .collect()
}

fn decimals_n<const N: usize>(el: &DicomElement, tag: Tag) -> Result<[f64; N]> {
    let values = decimals(el, tag)?;
    values.try_into().map_err(|_| invalid(tag, el.as_str()))
}

fn integer(el: &DicomElement, tag: Tag) -> Result<i64> {
    let text = el.as_str();
    text.trim().parse().map_err(|_| invalid(tag, text))
}

/// Parses an age string such as `056Y`. Month, week and day forms are rejected.
fn parse_age(el: &DicomElement) -> Result<u32> {
    let text = el.as_str();
    let digits = text
        .strip_suffix('Y')
        .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
        .ok_or_else(|| invalid(Tag::PATIENT_AGE, text.clone()))?;
    digits.parse().map_err(|_| invalid(Tag::PATIENT_AGE, text))
}

/// Decodes a single-frame image and its acquisition metadata.
///
/// The first two bytes of PixelData become pixel (0, 0); rows follow one
/// another without reordering.
pub fn parse_dicom(bytes: &[u8]) -> Result<(ImageMeta, Image<u16>)> {
    let el = read_elements(bytes)?;

    let rows = us_value(required(&el, Tag::ROWS)?, Tag::ROWS)? as usize;
    let cols = us_value(required(&el, Tag::COLUMNS)?, Tag::COLUMNS)? as usize;
    let [spacing_row, spacing_col] =
        decimals_n::<2>(required(&el, Tag::PIXEL_SPACING)?, Tag::PIXEL_SPACING)?;
    let ipp = decimals_n::<3>(required(&el, Tag::IMAGE_POSITION)?, Tag::IMAGE_POSITION)?;
    let iop = decimals_n::<6>(
        required(&el, Tag::IMAGE_ORIENTATION)?,
        Tag::IMAGE_ORIENTATION,
    )?;
    let pixel_data = required(&el, Tag::PIXEL_DATA)?;

    if let Some(e) = el.get(&Tag::SAMPLES_PER_PIXEL) {
        if us_value(e, Tag::SAMPLES_PER_PIXEL)? != 1 {
            return Err(IngestError::UnsupportedPixelFormat(
                "multi-sample pixels".into(),
            ));
        }
    }
    if let Some(e) = el.get(&Tag::BITS_ALLOCATED) {
        let bits = us_value(e, Tag::BITS_ALLOCATED)?;
        if bits != 16 {
            return Err(IngestError::UnsupportedPixelFormat(format!(
                "{bits} bits allocated"
            )));
        }
    }
    if let Some(e) = el.get(&Tag::PIXEL_REPRESENTATION) {
        if us_value(e, Tag::PIXEL_REPRESENTATION)? != 0 {
            return Err(IngestError::UnsupportedPixelFormat("signed pixels".into()));
        }
    }
    if let Some(e) = el.get(&Tag::NUMBER_OF_FRAMES) {
        if integer(e, Tag::NUMBER_OF_FRAMES)? != 1 {
            return Err(IngestError::UnsupportedPixelFormat(
                "multi-frame image".into(),
            ));
        }
    }

    let expected = rows * cols * 2;
    if pixel_data.value.len() < expected {
        return Err(IngestError::TruncatedPixelData {
            expected,
            actual: pixel_data.value.len(),
        });
    }
    let pixels: Vec<u16> = pixel_data.value[..expected]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    let phase_encoding = match el.get(&Tag::PHASE_ENCODING).map(DicomElement::as_str) {
        Some(s) if s == "ROW" => PhaseEncoding::Row,
        Some(s) if s == "COL" => PhaseEncoding::Col,
        _ => PhaseEncoding::Unknown,
    };
    let slice_location_raw = el
        .get(&Tag::SLICE_LOCATION)
        .map(|e| decimals_n::<1>(e, Tag::SLICE_LOCATION).map(|[v]| v))
        .transpose()?;
    let acquisition_index = match (
        el.get(&Tag::SERIES_NUMBER),
        el.get(&Tag::ACQUISITION_NUMBER),
    ) {
        (Some(e), _) => integer(e, Tag::SERIES_NUMBER)?,
        (None, Some(e)) => integer(e, Tag::ACQUISITION_NUMBER)?,
        (None, None) => 0,
    };
    let acquisition_index = u32::try_from(acquisition_index)
        .map_err(|_| invalid(Tag::SERIES_NUMBER, acquisition_index.to_string()))?;
    let patient_age = el.get(&Tag::PATIENT_AGE).map(parse_age).transpose()?;
    let patient_sex = match el.get(&Tag::PATIENT_SEX).map(DicomElement::as_str) {
        Some(s) if s == "M" => Sex::M,
        Some(s) if s == "F" => Sex::F,
        _ => Sex::Unknown,
    };

    let meta = ImageMeta {
        pixel_spacing_row: spacing_row,
        pixel_spacing_col: spacing_col,
        rows,
        cols,
        ipp,
        iop,
        phase_encoding,
        slice_location_raw,
        acquisition_index,
        patient_age,
        patient_sex,
    };
    meta.validate()?;
    Ok((meta, Image::from_vec(rows, cols, pixels)))
}

/// Assembles DICOM Part 10 files in the supported subset.
///
/// Used to export images and to craft fixtures; individual elements can be
/// overridden or removed before [`DicomBuilder::build`].
#[derive(Clone, Debug)]
pub struct DicomBuilder {
    transfer_syntax: String,
    elements: BTreeMap<Tag, DicomElement>,
}

impl Default for DicomBuilder {
    fn default() -> Self {
        DicomBuilder {
            transfer_syntax: EXPLICIT_VR_LE.to_string(),
            elements: BTreeMap::new(),
        }
    }
}

fn join_decimals(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("\\")
}

impl DicomBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every element needed to round-trip `meta` and `pixels` through
    /// [`parse_dicom`].
    pub fn from_image(meta: &ImageMeta, pixels: &Image<u16>) -> Self {
        let mut b = DicomBuilder::new()
            .us(Tag::SAMPLES_PER_PIXEL, 1)
            .us(Tag::ROWS, pixels.rows() as u16)
            .us(Tag::COLUMNS, pixels.cols() as u16)
            .us(Tag::BITS_ALLOCATED, 16)
            .us(Tag::PIXEL_REPRESENTATION, 0)
            .string(
                Tag::PIXEL_SPACING,
                *b"DS",
                &join_decimals(&[meta.pixel_spacing_row, meta.pixel_spacing_col]),
            )
            .string(Tag::IMAGE_POSITION, *b"DS", &join_decimals(&meta.ipp))
            .string(Tag::IMAGE_ORIENTATION, *b"DS", &join_decimals(&meta.iop))
            .string(
                Tag::SERIES_NUMBER,
                *b"IS",
                &meta.acquisition_index.to_string(),
            )
            .pixels(pixels);
        match meta.phase_encoding {
            PhaseEncoding::Row => b = b.string(Tag::PHASE_ENCODING, *b"CS", "ROW"),
            PhaseEncoding::Col => b = b.string(Tag::PHASE_ENCODING, *b"CS", "COL"),
            PhaseEncoding::Unknown => {}
        }
        if let Some(loc) = meta.slice_location_raw {
            b = b.string(Tag::SLICE_LOCATION, *b"DS", &loc.to_string());
        }
        if let Some(age) = meta.patient_age {
            b = b.string(Tag::PATIENT_AGE, *b"AS", &format!("{age:03}Y"));
        }
        match meta.patient_sex {
            Sex::M => b = b.string(Tag::PATIENT_SEX, *b"CS", "M"),
            Sex::F => b = b.string(Tag::PATIENT_SEX, *b"CS", "F"),
            Sex::Unknown => {}
        }
        b
    }

    pub fn transfer_syntax(mut self, uid: &str) -> Self {
        self.transfer_syntax = uid.to_string();
        self
    }

    pub fn string(mut self, tag: Tag, vr: [u8; 2], value: &str) -> Self {
        let mut bytes = value.as_bytes().to_vec();
        if bytes.len() % 2 == 1 {
            bytes.push(if &vr == b"UI" { 0 } else { b' ' });
        }
        self.elements.insert(tag, DicomElement { vr, value: bytes });
        self
    }

    pub fn us(mut self, tag: Tag, value: u16) -> Self {
        self.elements.insert(
            tag,
            DicomElement {
                vr: *b"US",
                value: value.to_le_bytes().to_vec(),
            },
        );
        self
    }

    pub fn raw(mut self, tag: Tag, vr: [u8; 2], value: Vec<u8>) -> Self {
        self.elements.insert(tag, DicomElement { vr, value });
        self
    }

    pub fn pixels(self, pixels: &Image<u16>) -> Self {
        let bytes = pixels.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.raw(Tag::PIXEL_DATA, *b"OW", bytes)
    }

    pub fn remove(mut self, tag: Tag) -> Self {
        self.elements.remove(&tag);
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let mut meta = Vec::new();
        write_element(&mut meta, Tag(0x0002, 0x0001), b"OB", &[0, 1]);
        let mut ts = self.transfer_syntax.as_bytes().to_vec();
        if ts.len() % 2 == 1 {
            ts.push(0);
        }
        write_element(&mut meta, Tag::TRANSFER_SYNTAX, b"UI", &ts);

        let mut out = vec![0u8; PREAMBLE_LEN];
        out.extend_from_slice(b"DICM");
        write_element(
            &mut out,
            Tag(0x0002, 0x0000),
            b"UL",
            &(meta.len() as u32).to_le_bytes(),
        );
        out.extend_from_slice(&meta);
        for (tag, el) in &self.elements {
            write_element(&mut out, *tag, &el.vr, &el.value);
        }
        out
    }
}

fn write_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if has_long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}
