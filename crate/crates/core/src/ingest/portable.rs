use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{Laterality, PixelSpacing, RawRadiograph};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Spacing may be given as one number or as `[row_mm, col_mm]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SidecarSpacing {
    Isotropic(f64),
    RowCol([f64; 2]),
}

/// Metadata accompanying a portable graymap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spacing_mm: Option<SidecarSpacing>,
    pub laterality: Option<Laterality>,
    pub source_id: Option<String>,
}

impl Sidecar {
    pub fn new(spacing_mm: f64, laterality: Laterality, source_id: impl Into<String>) -> Self {
        Self {
            spacing_mm: Some(SidecarSpacing::Isotropic(spacing_mm)),
            laterality: Some(laterality),
            source_id: Some(source_id.into()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Decodes an 8- or 16-bit grayscale image (PGM or PNG) and attaches sidecar metadata.
pub fn parse_portable(image_bytes: &[u8], sidecar: &Sidecar) -> Result<RawRadiograph> {
    let spacing = match sidecar.spacing_mm.ok_or(Error::MissingSidecarField("spacing_mm"))? {
        SidecarSpacing::Isotropic(v) => PixelSpacing::isotropic(v),
        SidecarSpacing::RowCol([row_mm, col_mm]) => PixelSpacing { row_mm, col_mm },
    };
    let laterality = sidecar
        .laterality
        .ok_or(Error::MissingSidecarField("laterality"))?;
    let source_id = sidecar
        .source_id
        .clone()
        .ok_or(Error::MissingSidecarField("source_id"))?;

    let decoded = decode(image_bytes)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (data, bit_depth): (Vec<u16>, u8) = match decoded {
        DynamicImage::ImageLuma8(buf) => (buf.into_raw().into_iter().map(u16::from).collect(), 8),
        DynamicImage::ImageLuma16(buf) => (buf.into_raw(), 16),
        _ => return Err(Error::NotGrayscale),
    };
    let grid = Grid::from_vec(w, h, data).expect("decoder yields w*h samples");
    RawRadiograph::new(grid, bit_depth, spacing, laterality, source_id)
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    let format = if bytes.starts_with(b"P") {
        ImageFormat::Pnm
    } else {
        image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?
    };
    image::load(Cursor::new(bytes), format).map_err(|e| Error::Decode(e.to_string()))
}

/// Binary PGM (`P5`) encoding of a raw radiograph; maxval follows the bit depth.
pub fn encode_pgm(img: &RawRadiograph) -> Vec<u8> {
    let maxval = super::max_intensity(img.bit_depth());
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    if img.bit_depth() == 8 {
        out.extend(img.pixels().data().iter().map(|&v| v as u8));
    } else {
        // PGM stores 16-bit samples big-endian.
        for &v in img.pixels().data() {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}
