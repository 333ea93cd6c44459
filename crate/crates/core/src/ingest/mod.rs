//! Radiograph input and Step 1 preprocessing.
//!
//! Inputs arrive either as a minimal uncompressed DICOM stream ([`parse_dicom`])
//! or as a portable graymap with a JSON sidecar ([`parse_portable`]). Both yield
//! a [`RawRadiograph`], which is resampled to 0.2 mm/pixel with a Catmull-Rom
//! bicubic kernel ([`resample_to_standard`]) and reduced to unit-scale 8-bit
//! levels ([`normalize`]).

mod dicom;
mod normalize;
mod portable;
mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use dicom::parse_dicom;
pub use normalize::{normalize, percentile_linear};
pub use portable::{encode_pgm, parse_portable, Sidecar, SidecarSpacing};
pub use resample::{catmull_rom, resample_to_standard, BICUBIC_SHARPNESS};

/// Step 1 in full: resample to the standard spacing, then normalize.
pub fn preprocess(img: &RawRadiograph) -> Result<NormalizedImage> {
    normalize(&resample_to_standard(img)?)
}

/// Target pixel pitch of every standardized image, in millimeters.
pub const STANDARD_SPACING_MM: f64 = 0.2;
/// Smallest accepted image side, before and after resampling.
pub const MIN_DIMENSION: usize = 64;

const SPACING_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Bilateral,
    Left,
    Right,
    Unknown,
}

impl Laterality {
    /// Maps DICOM `Laterality` / `ImageLaterality` code strings.
    pub fn from_dicom_code(code: &str) -> Self {
        match code.trim().to_ascii_uppercase().as_str() {
            "R" => Laterality::Right,
            "L" => Laterality::Left,
            "B" => Laterality::Bilateral,
            _ => Laterality::Unknown,
        }
    }
}

/// Physical pixel pitch. `row_mm` is the distance between adjacent rows,
/// `col_mm` between adjacent columns (DICOM PixelSpacing order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpacing {
    pub row_mm: f64,
    pub col_mm: f64,
}

impl PixelSpacing {
    pub fn isotropic(mm: f64) -> Self {
        Self {
            row_mm: mm,
            col_mm: mm,
        }
    }

    pub fn is_standard(&self) -> bool {
        (self.row_mm - STANDARD_SPACING_MM).abs() < SPACING_EPS
            && (self.col_mm - STANDARD_SPACING_MM).abs() < SPACING_EPS
    }

    fn validate(&self) -> Result<()> {
        for v in [self.row_mm, self.col_mm] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidImage(format!("pixel spacing {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Integer-valued radiograph as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRadiograph {
    pixels: Grid<u16>,
    bit_depth: u8,
    spacing: PixelSpacing,
    laterality: Laterality,
    source_id: String,
}

impl RawRadiograph {
    pub fn new(
        pixels: Grid<u16>,
        bit_depth: u8,
        spacing: PixelSpacing,
        laterality: Laterality,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::UnsupportedPixelFormat(format!("{bit_depth}-bit samples")));
        }
        spacing.validate()?;
        if pixels.width() < MIN_DIMENSION || pixels.height() < MIN_DIMENSION {
            return Err(Error::InvalidImage(format!(
                "{}x{} is smaller than {MIN_DIMENSION}x{MIN_DIMENSION}",
                pixels.width(),
                pixels.height()
            )));
        }
        let max = max_intensity(bit_depth);
        if let Some(v) = pixels.data().iter().find(|&&v| v > max) {
            return Err(Error::InvalidImage(format!(
                "intensity {v} exceeds {bit_depth}-bit range"
            )));
        }
        Ok(Self {
            pixels,
            bit_depth,
            spacing,
            laterality,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Grid<u16> {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.spacing
    }

    pub fn laterality(&self) -> Laterality {
        self.laterality
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn with_laterality(mut self, laterality: Laterality) -> Self {
        self.laterality = laterality;
        self
    }
}

pub(crate) fn max_intensity(bit_depth: u8) -> u16 {
    if bit_depth >= 16 {
        u16::MAX
    } else {
        (1u16 << bit_depth) - 1
    }
}

/// Unit-scale image at exactly 0.2 mm/pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pixels: Grid<f32>,
    laterality: Laterality,
    source_id: String,
    /// Intensity window used for 16-bit reduction, when one was applied.
    window: Option<(f64, f64)>,
    degenerate_window: bool,
}

impl NormalizedImage {
    /// Wraps unit-interval pixels that are already at the standard spacing.
    pub fn from_unit_pixels(
        pixels: Grid<f32>,
        laterality: Laterality,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(v) = pixels
            .data()
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidImage(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            laterality,
            source_id: source_id.into(),
            window: None,
            degenerate_window: false,
        })
    }

    pub fn pixels(&self) -> &Grid<f32> {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn spacing_mm(&self) -> f64 {
        STANDARD_SPACING_MM
    }

    pub fn laterality(&self) -> Laterality {
        self.laterality
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn window(&self) -> Option<(f64, f64)> {
        self.window
    }

    pub fn degenerate_window(&self) -> bool {
        self.degenerate_window
    }
}

impl NormalizedImage {
    /// 8-bit graymap at the standard spacing; exact for images quantized to k/255.
    pub fn to_raw_8bit(&self) -> Result<RawRadiograph> {
        let pixels = self.pixels.map(|v| (f64::from(v) * 255.0).round() as u16);
        RawRadiograph::new(
            pixels,
            8,
            PixelSpacing::isotropic(STANDARD_SPACING_MM),
            self.laterality,
            self.source_id.clone(),
        )
    }
}
