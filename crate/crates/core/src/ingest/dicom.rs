//! Minimal reader for single-frame grayscale DICOM in the two uncompressed
//! little-endian transfer syntaxes. Anything else is rejected explicitly.

use super::{Laterality, PixelSpacing, RawRadiograph};
use crate::error::{Error, Result, Tag};
use crate::grid::Grid;

const TS_IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const TS_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
const LATERALITY: Tag = Tag(0x0020, 0x0060);
const IMAGE_LATERALITY: Tag = Tag(0x0020, 0x0062);
const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
const NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
const ROWS: Tag = Tag(0x0028, 0x0010);
const COLUMNS: Tag = Tag(0x0028, 0x0011);
const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

const ITEM: Tag = Tag(0xFFFE, 0xE000);
const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Syntax {
    ExplicitLe,
    ImplicitLe,
}

struct Element {
    tag: Tag,
    /// `None` for undefined length.
    len: Option<usize>,
    value_start: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedElement {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 2)
            .ok_or_else(|| self.malformed("truncated 16-bit field"))?;
        self.pos += 2;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.malformed("truncated 32-bit field"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn peek_group(&self) -> Option<u16> {
        self.bytes
            .get(self.pos..self.pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn header(&mut self, syntax: Syntax) -> Result<Element> {
        let tag = Tag(self.u16()?, self.u16()?);
        // Item and delimiter tags never carry a VR.
        if tag.0 == 0xFFFE {
            let len = self.u32()?;
            return Ok(Element {
                tag,
                len: (len != UNDEFINED_LENGTH).then_some(len as usize),
                value_start: self.pos,
            });
        }
        let len = match syntax {
            Syntax::ImplicitLe => self.u32()?,
            Syntax::ExplicitLe => {
                let vr_bytes = self
                    .bytes
                    .get(self.pos..self.pos + 2)
                    .ok_or_else(|| self.malformed("truncated VR"))?;
                let vr = [vr_bytes[0], vr_bytes[1]];
                if !vr.iter().all(u8::is_ascii_uppercase) {
                    return Err(self.malformed(format!("invalid VR for tag {tag}")));
                }
                self.pos += 2;
                if has_long_length(&vr) {
                    self.pos += 2;
                    self.u32()?
                } else {
                    u32::from(self.u16()?)
                }
            }
        };
        let el = Element {
            tag,
            len: (len != UNDEFINED_LENGTH).then_some(len as usize),
            value_start: self.pos,
        };
        if let Some(len) = el.len {
            if len > self.remaining() {
                return Err(Error::MalformedElement {
                    offset: self.pos,
                    reason: format!(
                        "element {tag} declares {len} bytes but only {} remain",
                        self.remaining()
                    ),
                });
            }
        }
        Ok(el)
    }

    fn skip_value(&mut self, el: &Element, syntax: Syntax) -> Result<()> {
        match el.len {
            Some(len) => {
                self.pos = el.value_start + len;
                Ok(())
            }
            None => self.skip_undefined_sequence(syntax),
        }
    }

    /// Skips items until the sequence delimiter. Nested sequences recurse.
    fn skip_undefined_sequence(&mut self, syntax: Syntax) -> Result<()> {
        loop {
            if self.remaining() == 0 {
                return Err(self.malformed("unterminated sequence"));
            }
            let el = self.header(syntax)?;
            match el.tag {
                SEQUENCE_DELIMITER => return Ok(()),
                ITEM => match el.len {
                    Some(len) => {
                        if len > self.remaining() {
                            return Err(self.malformed("item overruns buffer"));
                        }
                        self.pos += len;
                    }
                    None => self.skip_undefined_item(syntax)?,
                },
                other => return Err(self.malformed(format!("unexpected {other} inside sequence"))),
            }
        }
    }

    fn skip_undefined_item(&mut self, syntax: Syntax) -> Result<()> {
        loop {
            if self.remaining() == 0 {
                return Err(self.malformed("unterminated item"));
            }
            let el = self.header(syntax)?;
            if el.tag == ITEM_DELIMITER {
                return Ok(());
            }
            self.skip_value(&el, syntax)?;
        }
    }
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR"
            | b"UT" | b"UV"
    )
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn read_us(bytes: &[u8], tag: Tag, offset: usize) -> Result<u16> {
    if bytes.len() < 2 {
        return Err(Error::MalformedElement {
            offset,
            reason: format!("{tag} is shorter than 2 bytes"),
        });
    }
    Ok(u16::from_le_bytes([bytes[0], bytes[1]]))
}

#[derive(Default)]
struct Collected<'a> {
    rows: Option<u16>,
    columns: Option<u16>,
    bits_allocated: Option<u16>,
    pixel_representation: Option<u16>,
    samples_per_pixel: Option<u16>,
    frames: Option<String>,
    spacing: Option<String>,
    laterality: Option<String>,
    image_laterality: Option<String>,
    sop_instance_uid: Option<String>,
    pixel_data: Option<(&'a [u8], usize)>,
}

/// Parses a single-frame grayscale DICOM stream.
pub fn parse_dicom(bytes: &[u8]) -> Result<RawRadiograph> {
    let mut r = Reader { bytes, pos: 0 };
    let has_preamble = bytes.len() >= 132 && &bytes[128..132] == b"DICM";
    if has_preamble {
        r.pos = 132;
    }

    let syntax = if r.peek_group() == Some(0x0002) {
        let mut ts = None;
        while r.peek_group() == Some(0x0002) {
            let el = r.header(Syntax::ExplicitLe)?;
            let len = el.len.ok_or_else(|| r.malformed("undefined length in file meta"))?;
            if el.tag == TRANSFER_SYNTAX {
                ts = Some(text(&bytes[el.value_start..el.value_start + len]));
            }
            r.pos = el.value_start + len;
        }
        match ts.as_deref() {
            Some(TS_EXPLICIT_LE) => Syntax::ExplicitLe,
            Some(TS_IMPLICIT_LE) => Syntax::ImplicitLe,
            Some(other) => return Err(Error::UnsupportedTransferSyntax(other.to_string())),
            None => return Err(Error::MissingRequiredTag(TRANSFER_SYNTAX)),
        }
    } else if has_preamble {
        return Err(Error::MissingRequiredTag(TRANSFER_SYNTAX));
    } else {
        // Raw data set without file meta: default transfer syntax.
        Syntax::ImplicitLe
    };

    let mut c = Collected::default();
    while r.remaining() > 0 {
        let offset = r.pos;
        let el = r.header(syntax)?;
        if el.tag.0 == 0xFFFE {
            return Err(Error::MalformedElement {
                offset,
                reason: format!("stray {} at top level", el.tag),
            });
        }
        if el.tag == PIXEL_DATA {
            let Some(len) = el.len else {
                return Err(Error::UnsupportedTransferSyntax(
                    "encapsulated (compressed) pixel data".into(),
                ));
            };
            c.pixel_data = Some((&bytes[el.value_start..el.value_start + len], offset));
            break;
        }
        let Some(len) = el.len else {
            r.skip_value(&el, syntax)?;
            continue;
        };
        let value = &bytes[el.value_start..el.value_start + len];
        match el.tag {
            ROWS => c.rows = Some(read_us(value, el.tag, offset)?),
            COLUMNS => c.columns = Some(read_us(value, el.tag, offset)?),
            BITS_ALLOCATED => c.bits_allocated = Some(read_us(value, el.tag, offset)?),
            PIXEL_REPRESENTATION => c.pixel_representation = Some(read_us(value, el.tag, offset)?),
            SAMPLES_PER_PIXEL => c.samples_per_pixel = Some(read_us(value, el.tag, offset)?),
            NUMBER_OF_FRAMES => c.frames = Some(text(value)),
            PIXEL_SPACING => c.spacing = Some(text(value)),
            LATERALITY => c.laterality = Some(text(value)),
            IMAGE_LATERALITY => c.image_laterality = Some(text(value)),
            SOP_INSTANCE_UID => c.sop_instance_uid = Some(text(value)),
            _ => {}
        }
        r.pos = el.value_start + len;
    }

    build(c)
}

fn build(c: Collected<'_>) -> Result<RawRadiograph> {
    let rows = c.rows.ok_or(Error::MissingRequiredTag(ROWS))? as usize;
    let cols = c.columns.ok_or(Error::MissingRequiredTag(COLUMNS))? as usize;
    let spacing_text = c.spacing.ok_or(Error::MissingRequiredTag(PIXEL_SPACING))?;
    let (pixel_bytes, pixel_offset) = c.pixel_data.ok_or(Error::MissingRequiredTag(PIXEL_DATA))?;

    if let Some(spp) = c.samples_per_pixel {
        if spp != 1 {
            return Err(Error::NotGrayscale);
        }
    }
    if let Some(frames) = c.frames.as_deref() {
        if frames.parse::<u32>().map_or(true, |n| n > 1) {
            return Err(Error::UnsupportedPixelFormat(format!("NumberOfFrames {frames}")));
        }
    }

    let spacing = parse_spacing(&spacing_text)?;

    let n = rows * cols;
    let bits = match c.bits_allocated {
        Some(b) => b,
        // BitsAllocated absent: infer from the pixel payload size.
        None if pixel_bytes.len() >= 2 * n => 16,
        None => 8,
    };
    let signed = c.pixel_representation == Some(1);
    let data: Vec<u16> = match bits {
        8 => {
            check_len(pixel_bytes.len(), n, pixel_offset)?;
            pixel_bytes[..n]
                .iter()
                .map(|&b| if signed { u16::from(b ^ 0x80) } else { u16::from(b) })
                .collect()
        }
        16 => {
            check_len(pixel_bytes.len(), 2 * n, pixel_offset)?;
            pixel_bytes[..2 * n]
                .chunks_exact(2)
                .map(|p| {
                    let v = u16::from_le_bytes([p[0], p[1]]);
                    // Two's complement shifted to an order-preserving unsigned range.
                    if signed {
                        v ^ 0x8000
                    } else {
                        v
                    }
                })
                .collect()
        }
        other => {
            return Err(Error::UnsupportedPixelFormat(format!("BitsAllocated {other}")));
        }
    };

    let laterality = c
        .laterality
        .as_deref()
        .filter(|s| !s.is_empty())
        .or(c.image_laterality.as_deref().filter(|s| !s.is_empty()))
        .map(Laterality::from_dicom_code)
        .unwrap_or(Laterality::Unknown);

    let grid = Grid::from_vec(cols, rows, data).expect("pixel count matches dimensions");
    RawRadiograph::new(
        grid,
        bits as u8,
        spacing,
        laterality,
        c.sop_instance_uid.unwrap_or_else(|| "dicom".to_string()),
    )
}

fn check_len(have: usize, need: usize, offset: usize) -> Result<()> {
    if have < need {
        return Err(Error::MalformedElement {
            offset,
            reason: format!("pixel data holds {have} bytes, image needs {need}"),
        });
    }
    Ok(())
}

fn parse_spacing(s: &str) -> Result<PixelSpacing> {
    let values: Vec<f64> = s
        .split('\\')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedElement {
            offset: 0,
            reason: format!("PixelSpacing `{s}` is not a decimal string"),
        })?;
    let spacing = match values.as_slice() {
        [v] => PixelSpacing::isotropic(*v),
        [row, col] => PixelSpacing {
            row_mm: *row,
            col_mm: *col,
        },
        _ => {
            return Err(Error::MalformedElement {
                offset: 0,
                reason: format!("PixelSpacing `{s}` must hold one or two values"),
            })
        }
    };
    Ok(spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_parses_pairs_and_singletons() {
        let s = parse_spacing("0.143\\0.15").unwrap();
        assert_eq!(s.row_mm, 0.143);
        assert_eq!(s.col_mm, 0.15);
        assert_eq!(parse_spacing(" 0.2 ").unwrap(), PixelSpacing::isotropic(0.2));
        assert!(parse_spacing("abc").is_err());
        assert!(parse_spacing("1\\2\\3").is_err());
    }

    #[test]
    fn empty_stream_is_missing_tags() {
        assert!(matches!(parse_dicom(&[]), Err(Error::MissingRequiredTag(ROWS))));
    }

    #[test]
    fn truncated_header_is_malformed() {
        // Group/element only, no length.
        let bytes = [0x28, 0x00, 0x10, 0x00];
        assert!(matches!(parse_dicom(&bytes), Err(Error::MalformedElement { .. })));
    }
}
