//! Train-time and test-time regions of classification.
//!
//! Training draws a random rectangle (area fraction and aspect ratio from
//! configured ranges) and resizes it to the network input; testing resizes
//! the whole image and keeps a centred square. The two disagree on how
//! large objects look in the crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::resize::resize_bilinear;
use crate::error::{Error, Result};

/// Attempts at drawing a valid rectangle before falling back to the
/// maximal centred square.
pub const ROC_ATTEMPTS: usize = 10;

/// Axis-aligned region of an image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoC {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl RoC {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// Area as a fraction of an `height x width` image.
    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        (self.w * self.h) as f64 / (height * width) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub area_fraction_range: (f64, f64),
    pub aspect_ratio_range: (f64, f64),
    pub flip_probability: f64,
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            area_fraction_range: (0.08, 1.0),
            aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            out_size: 224,
        }
    }
}

impl AugmentConfig {
    pub fn with_out_size(mut self, out_size: usize) -> Self {
        self.out_size = out_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (alo, ahi) = self.area_fraction_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::invalid(format!(
                "area_fraction_range must satisfy 0 < lo <= hi <= 1, got ({alo}, {ahi})"
            )));
        }
        let (rlo, rhi) = self.aspect_ratio_range;
        if !(rlo > 0.0 && rlo <= 1.0 && 1.0 <= rhi && rhi.is_finite()) {
            return Err(Error::invalid(format!(
                "aspect_ratio_range must satisfy 0 < lo <= 1 <= hi, got ({rlo}, {rhi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if self.out_size < 8 {
            return Err(Error::invalid(format!(
                "out_size must be at least 8, got {}",
                self.out_size
            )));
        }
        Ok(())
    }
}

/// Draws a training region: area fraction uniform in range, aspect ratio
/// log-uniform in range, position uniform; falls back to the maximal
/// centred square after [`ROC_ATTEMPTS`] rejected draws.
pub fn sample_roc<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<RoC> {
    config.validate()?;
    if height < 8 || width < 8 {
        return Err(Error::invalid(format!(
            "image must be at least 8x8 for crop sampling, got {height}x{width}"
        )));
    }
    let area = (height * width) as f64;
    let (alo, ahi) = config.area_fraction_range;
    let (log_lo, log_hi) = (config.aspect_ratio_range.0.ln(), config.aspect_ratio_range.1.ln());
    for _ in 0..ROC_ATTEMPTS {
        let target = area * uniform(rng, alo, ahi);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return Ok(RoC { x, y, w, h });
        }
    }
    let side = height.min(width);
    Ok(RoC {
        x: (width - side) / 2,
        y: (height - side) / 2,
        w: side,
        h: side,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Training pre-processing: sampled region, bilinear resize to
/// `out_size x out_size`, then a horizontal flip with `flip_probability`.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Image,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<Image> {
    let roc = sample_roc(image.height(), image.width(), rng, config)?;
    let region = image.crop(roc.y, roc.x, roc.h, roc.w)?;
    let resized = resize_bilinear(&region, config.out_size, config.out_size)?;
    let flip = rng.random::<f64>() < config.flip_probability;
    Ok(if flip { resized.flip_horizontal() } else { resized })
}

/// Test-time pre-processing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestPreproc {
    pub crop_ratio: f64,
    pub out_size: usize,
}

impl Default for TestPreproc {
    fn default() -> Self {
        Self {
            crop_ratio: 0.875,
            out_size: 224,
        }
    }
}

impl TestPreproc {
    pub fn at(out_size: usize) -> Self {
        Self {
            out_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "crop_ratio must be in (0, 1], got {}",
                self.crop_ratio
            )));
        }
        if self.out_size == 0 {
            return Err(Error::invalid("out_size must be positive"));
        }
        Ok(())
    }

    /// Shorter side after the first resize: `round(out_size / crop_ratio)`.
    pub fn resize_short_side(&self) -> usize {
        ((self.out_size as f64 / self.crop_ratio).round() as usize).max(self.out_size)
    }

    /// Resized dimensions and the centred window for an input of the given
    /// size. Returns `(resized_h, resized_w, top, left)`.
    pub fn geometry(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let short = self.resize_short_side();
        let (rh, rw) = if height <= width {
            let w = (width as f64 * short as f64 / height as f64).round() as usize;
            (short, w.max(short))
        } else {
            let h = (height as f64 * short as f64 / width as f64).round() as usize;
            (h.max(short), short)
        };
        // odd leftovers put the extra pixel on the bottom/right
        (rh, rw, (rh - self.out_size) / 2, (rw - self.out_size) / 2)
    }

    /// The region of the original image that ends up in the crop.
    pub fn roc(&self, height: usize, width: usize) -> (f64, f64) {
        let (rh, rw, _, _) = self.geometry(height, width);
        let sy = height as f64 / rh as f64;
        let sx = width as f64 / rw as f64;
        (self.out_size as f64 * sy, self.out_size as f64 * sx)
    }
}

/// Test pre-processing: resize the shorter side to
/// `round(out_size / crop_ratio)` keeping the aspect ratio, then keep the
/// centred `out_size x out_size` window.
pub fn center_crop_preproc(image: &Image, preproc: &TestPreproc) -> Result<Image> {
    preproc.validate()?;
    if image.height() < 2 || image.width() < 2 {
        return Err(Error::invalid(format!(
            "image must be at least 2x2, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let (rh, rw, top, left) = preproc.geometry(image.height(), image.width());
    let resized = resize_bilinear(image, rh, rw)?;
    resized.crop(top, left, preproc.out_size, preproc.out_size)
}
