//! CT slices, synthetic phantoms, low-dose simulation, HU windowing and the
//! on-disk slice/manifest formats.

mod dose;
mod io;
mod phantom;

pub use dose::{simulate_low_dose, DoseSimConfig, WATER_PATH_ATTENUATION};
pub use io::{
    load_dataset, read_manifest, read_slice, write_pair_manifest, write_slice,
    write_slice_manifest, ManifestRecord,
};
pub use phantom::make_phantom;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Lowest representable value (air) in the 12-bit CT convention.
pub const HU_MIN: f32 = -1024.0;
/// Highest representable value in the 12-bit CT convention.
pub const HU_MAX: f32 = 3071.0;
/// Smallest accepted slice edge.
pub const MIN_SLICE_DIM: usize = 16;

/// A 2D slice of Hounsfield-unit values.
///
/// Values are clamped to `[HU_MIN, HU_MAX]` on construction and are always
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CtSlice {
    pixels: Array2<f32>,
}

impl CtSlice {
    pub fn new(mut pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_SLICE_DIM || w < MIN_SLICE_DIM {
            return Err(invalid!(
                "slice is {h}x{w}, both dimensions must be at least {MIN_SLICE_DIM}"
            ));
        }
        if let Some(((y, x), v)) = pixels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid!("non-finite pixel {v} at row {y}, column {x}"));
        }
        pixels.mapv_inplace(|v| v.clamp(HU_MIN, HU_MAX));
        Ok(Self { pixels })
    }

    pub fn filled(height: usize, width: usize, hu: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), hu))
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let pixels = Array2::from_shape_vec((height, width), values)
            .map_err(|e| invalid!("cannot shape {height}x{width} slice: {e}"))?;
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// A low-dose / normal-dose pair with matching dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub ldct: CtSlice,
    pub ndct: CtSlice,
    pub sample_id: String,
}

impl PairedSample {
    pub fn new(ldct: CtSlice, ndct: CtSlice, sample_id: impl Into<String>) -> Result<Self> {
        let sample_id = sample_id.into();
        if ldct.dims() != ndct.dims() {
            return Err(crate::Error::Shape(format!(
                "pair `{sample_id}`: ldct is {:?} but ndct is {:?}",
                ldct.dims(),
                ndct.dims()
            )));
        }
        Ok(Self {
            ldct,
            ndct,
            sample_id,
        })
    }
}

/// HU display window mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub min: f32,
    pub max: f32,
}

impl Window {
    /// Soft-tissue window used for network input and metrics by default.
    pub const SOFT_TISSUE: Window = Window {
        min: -160.0,
        max: 240.0,
    };
    /// The whole representable HU range.
    pub const FULL_RANGE: Window = Window {
        min: HU_MIN,
        max: HU_MAX,
    };

    pub fn new(min: f32, max: f32) -> Result<Self> {
        let w = Window { min, max };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min >= self.max {
            return Err(invalid!(
                "window minimum {} must be below maximum {}",
                self.min,
                self.max
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.max - self.min
    }
}

impl Default for Window {
    fn default() -> Self {
        Window::SOFT_TISSUE
    }
}

/// Image mapped into `[0, 1]` through a HU window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pixels: Array2<f32>,
    window: Window,
}

impl NormalizedImage {
    pub fn new(pixels: Array2<f32>, window: Window) -> Result<Self> {
        window.validate()?;
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("normalized pixel {v} outside [0, 1]"));
        }
        Ok(Self { pixels, window })
    }

    /// Clamps into `[0, 1]` instead of rejecting; NaN becomes 0.
    pub fn from_clamped(mut pixels: Array2<f32>, window: Window) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(pixels, window)
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

pub fn normalize_hu(slice: &CtSlice, window: Window) -> Result<NormalizedImage> {
    window.validate()?;
    let lo = window.min as f64;
    let span = window.max as f64 - lo;
    let pixels = slice
        .pixels()
        .mapv(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32);
    Ok(NormalizedImage { pixels, window })
}

pub fn denormalize(img: &NormalizedImage) -> Result<CtSlice> {
    let lo = img.window.min as f64;
    let span = img.window.max as f64 - lo;
    CtSlice::new(img.pixels.mapv(|v| (v as f64 * span + lo) as f32))
}
