use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 8-bit image, row-major with interleaved channels (`HWC`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or(Error::DimensionOverflow("image"))?;
        if pixels.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `h x w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y}, {x}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let row = w * self.channels;
        let mut pixels = Vec::with_capacity(h * row);
        for yy in y..y + h {
            let start = (yy * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + row]);
        }
        Image::new(h, w, self.channels, pixels)
    }

    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width * c) {
            for px in row.chunks_exact(c).rev() {
                pixels.extend_from_slice(px);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }

    /// Writes the image as planar `C x H x W` floats, `(v / 255 - mean) / std`.
    pub fn write_chw<T: Scalar>(&self, mean: f64, std: f64, out: &mut [T]) {
        let hw = self.height * self.width;
        debug_assert_eq!(out.len(), hw * self.channels);
        for (i, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = T::of((v as f64 / 255.0 - mean) / std);
            }
        }
    }
}

/// Images with class labels; every image shares one geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    images: Vec<Image>,
    labels: Vec<u16>,
}

impl LabeledDataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        images: Vec<Image>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes < 2 || num_classes > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "num_classes must be in [2, 65536], got {num_classes}"
            )));
        }
        if let Some(bad) = images
            .iter()
            .find(|im| (im.height, im.width, im.channels) != (height, width, channels))
        {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: vec![height, width, channels],
                rhs: vec![bad.height, bad.width, bad.channels],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&Image, usize) {
        (&self.images[i], self.labels[i] as usize)
    }

    /// Copies the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "sample index {bad} outside dataset of {}",
                self.len()
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Appends another dataset with identical geometry and class count.
    pub fn concat(mut self, other: LabeledDataset) -> Result<Self> {
        if (self.height, self.width, self.channels, self.num_classes)
            != (other.height, other.width, other.channels, other.num_classes)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: vec![self.height, self.width, self.channels, self.num_classes],
                rhs: vec![other.height, other.width, other.channels, other.num_classes],
            });
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(self)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}
