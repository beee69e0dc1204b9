//! Grayscale raster of 64-bit reals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {h}x{w}")]
    ZeroSize { h: usize, w: usize },
    #[error("pixel buffer length {len} does not match {h}x{w}")]
    LengthMismatch { h: usize, w: usize, len: usize },
    #[error("non-finite pixel at index {0}")]
    NonFinite(usize),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

/// H x W grayscale image, row-major. Values are unrestricted finite reals;
/// clamping to [0, 1] happens only on export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if h == 0 || w == 0 {
            return Err(ImageError::ZeroSize { h, w });
        }
        if pixels.len() != h * w {
            return Err(ImageError::LengthMismatch {
                h,
                w,
                len: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { h, w, pixels })
    }

    pub(crate) fn from_raw(h: usize, w: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), h * w);
        Self { h, w, pixels }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0);
        Self {
            h,
            w,
            pixels: vec![0.0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0 && value.is_finite());
        Self {
            h,
            w,
            pixels: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(h > 0 && w > 0);
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pixels.push(f(y, x));
            }
        }
        Self { h, w, pixels }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.w + x] = v;
    }

    pub fn same_size(&self, other: &Self) -> Result<(), ImageError> {
        if self.h != other.h || self.w != other.w {
            return Err(ImageError::SizeMismatch(self.h, self.w, other.h, other.w));
        }
        Ok(())
    }

    /// Copy with every pixel clamped to [0, 1]; the export path.
    pub fn clamped01(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.pixels.iter().fold(0.0_f64, |m, p| m.max(p.abs()))
    }
}
