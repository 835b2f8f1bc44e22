//! Value types for image planes: RGB images, alpha mattes, and signed
//! shadow residuals.
//!
//! All planes store row-major `f64` data. RGB planes interleave channels
//! (`[r, g, b, r, g, b, ...]`); alpha planes hold one value per pixel.
//! Constructors validate range and finiteness; every operation in the rest
//! of the crate may assume a constructed plane is in range.

use crate::error::{Error, Result};

const RGB_CHANNELS: usize = 3;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::EmptyInput("image dimensions must be >= 1"));
    }
    Ok(())
}

/// An RGB image with per-channel intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved RGB data, validating range and size.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * RGB_CHANNELS {
            return Err(Error::InvalidParameter {
                name: "data",
                message: format!(
                    "expected {} values for {}x{} rgb, got {}",
                    height * width * RGB_CHANNELS,
                    height,
                    width,
                    data.len()
                ),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                let px = i / RGB_CHANNELS;
                return Err(Error::InvalidPixel {
                    y: px / width,
                    x: px % width,
                    value: v,
                    expected: "finite value in [0,1]",
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-color image.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width * RGB_CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    /// All-white image, the canvas used by white-background compositing.
    pub fn white(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, [1.0, 1.0, 1.0])
    }

    /// Internal constructor for outputs already proven in range.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * RGB_CHANNELS);
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Interleaved RGB data, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * RGB_CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Largest absolute per-channel difference against `other`.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::dims("max_abs_diff", self.dims(), other.dims()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// A per-pixel opacity plane with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AlphaMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::InvalidParameter {
                name: "data",
                message: format!(
                    "expected {} values for {}x{} mask, got {}",
                    height * width,
                    height,
                    width,
                    data.len()
                ),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidPixel {
                    y: i / width,
                    x: i % width,
                    value: v,
                    expected: "finite value in [0,1]",
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-opacity mask.
    pub fn filled(height: usize, width: usize, alpha: f64) -> Result<Self> {
        check_dims(height, width)?;
        Self::new(height, width, vec![alpha; height * width])
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sum of all opacities, i.e. the mask "mass".
    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Signed per-pixel RGB residual with values in `[-1, 1]`.
///
/// Stores the difference between a source photograph and the recomposition
/// of its layers, capturing illumination footprints such as cast shadows
/// and contact darkening. Never clamped during curation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowResidual {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ShadowResidual {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * RGB_CHANNELS {
            return Err(Error::InvalidParameter {
                name: "data",
                message: format!(
                    "expected {} values for {}x{} residual, got {}",
                    height * width * RGB_CHANNELS,
                    height,
                    width,
                    data.len()
                ),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                let px = i / RGB_CHANNELS;
                return Err(Error::InvalidPixel {
                    y: px / width,
                    x: px % width,
                    value: v,
                    expected: "finite value in [-1,1]",
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// All-zero residual (recomposition already explains the source).
    pub fn zero(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![0.0; height * width * RGB_CHANNELS],
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * RGB_CHANNELS);
        debug_assert!(data
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Interleaved signed RGB data, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}
