//! Procedural shapes dataset.
//!
//! Each class is one shape rendered at a random scale and position on a
//! flat background, with optional contrast jitter and pixel noise. The
//! object scale is the fraction of the image side covered by the shape's
//! bounding box, which makes apparent object size directly controllable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;

/// Shape classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Ellipse,
    Ring,
    Triangle,
    Frame,
    Cross,
    Bar,
    Diamond,
    Saltire,
}

impl Shape {
    pub const ALL: [Shape; 10] = [
        Shape::Disk,
        Shape::Square,
        Shape::Ellipse,
        Shape::Ring,
        Shape::Triangle,
        Shape::Frame,
        Shape::Cross,
        Shape::Bar,
        Shape::Diamond,
        Shape::Saltire,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Ring => "ring",
            Shape::Triangle => "triangle",
            Shape::Frame => "frame",
            Shape::Cross => "cross",
            Shape::Bar => "bar",
            Shape::Diamond => "diamond",
            Shape::Saltire => "saltire",
        }
    }

    /// Membership test in box coordinates `u, v` in `[-1, 1]` (v points down).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => au <= 0.85 && av <= 0.85,
            Shape::Ellipse => u * u + v * v / 0.36 <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2)
            }
            Shape::Triangle => av <= 1.0 && au <= (v + 1.0) / 2.0,
            Shape::Frame => {
                let m = au.max(av);
                (0.75..=1.0).contains(&m)
            }
            Shape::Cross => au <= 1.0 && av <= 1.0 && (au <= 0.22 || av <= 0.22),
            Shape::Bar => au <= 1.0 && av <= 0.3,
            Shape::Diamond => au + av <= 1.0,
            Shape::Saltire => {
                au <= 1.0 && av <= 1.0 && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub base_resolution: usize,
    pub object_scale_range: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 100,
            base_resolution: 64,
            object_scale_range: (0.25, 0.6),
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn count(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > Shape::ALL.len() {
            return Err(Error::TooManyClasses {
                requested: self.num_classes,
                available: Shape::ALL.len(),
            });
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        if self.base_resolution < 8 {
            return Err(Error::invalid(format!(
                "base_resolution must be at least 8, got {}",
                self.base_resolution
            )));
        }
        let (lo, hi) = self.object_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "object_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid(format!(
                "noise_level must be in [0, 1], got {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    /// Rejects base resolutions that would need upsampling to produce crops
    /// of `max_crop` pixels.
    pub fn check_resolution_for(&self, max_crop: usize) -> Result<()> {
        if self.base_resolution < max_crop {
            return Err(Error::invalid(format!(
                "base_resolution {} is below the largest intended crop {max_crop}",
                self.base_resolution
            )));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 40.0;
const FOREGROUND: f64 = 200.0;
const CONTRAST_JITTER: f64 = 60.0;
const PIXEL_NOISE: f64 = 50.0;
const SUPERSAMPLE: usize = 3;

/// Renders one sample of `shape` from its own RNG stream.
fn render<R: Rng>(shape: Shape, spec: &DatasetSpec, rng: &mut R) -> Result<Image> {
    let res = spec.base_resolution;
    let (lo, hi) = spec.object_scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let half = scale * res as f64 / 2.0;
    let span = res as f64 - 2.0 * half;
    let cx = half + rng.random::<f64>() * span;
    let cy = half + rng.random::<f64>() * span;
    let jitter = spec.noise_level * CONTRAST_JITTER;
    let bg = BACKGROUND + jitter * (rng.random::<f64>() - 0.5);
    let fg = FOREGROUND + jitter * (rng.random::<f64>() - 0.5);
    let noise = Normal::new(0.0, spec.noise_level * PIXEL_NOISE)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let sub = SUPERSAMPLE as f64;
    let mut pixels = Vec::with_capacity(res * res);
    for py in 0..res {
        for px in 0..res {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / sub;
                    let y = py as f64 + (sy as f64 + 0.5) / sub;
                    if shape.contains((x - cx) / half, (y - cy) / half) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (sub * sub);
            let mut v = bg + (fg - bg) * cover;
            if spec.noise_level > 0.0 {
                v += noise.sample(rng);
            }
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(res, res, 1, pixels)
}

/// Generates `num_classes * samples_per_class` grayscale images. Labels
/// cycle through the classes, so every class has exactly
/// `samples_per_class` samples. Sample `i` is drawn from RNG stream `i` of
/// `spec.seed`, which makes the output independent of generation order.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.count();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let mut stream = rng::stream(spec.seed, i as u64);
        images.push(render(Shape::ALL[label], spec, &mut stream)?);
        labels.push(label as u16);
    }
    LabeledDataset::new(
        spec.base_resolution,
        spec.base_resolution,
        1,
        spec.num_classes,
        images,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_classes: 5,
            samples_per_class: 6,
            base_resolution: 24,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(synth_dataset(&small(3)).unwrap(), synth_dataset(&small(3)).unwrap());
        assert_ne!(synth_dataset(&small(3)).unwrap(), synth_dataset(&small(4)).unwrap());
    }

    #[test]
    fn labels_exactly_balanced() {
        let ds = synth_dataset(&small(1)).unwrap();
        assert_eq!(ds.class_counts(), vec![6; 5]);
    }

    #[test]
    fn too_many_classes() {
        let spec = DatasetSpec {
            num_classes: 11,
            ..small(0)
        };
        assert!(matches!(
            synth_dataset(&spec),
            Err(Error::TooManyClasses { requested: 11, available: 10 })
        ));
        let one = DatasetSpec {
            num_classes: 1,
            ..small(0)
        };
        assert!(synth_dataset(&one).is_err());
    }

    #[test]
    fn shapes_have_distinct_areas() {
        // box-relative areas of the first eight shapes, by dense sampling
        let n = 400;
        let areas: Vec<f64> = Shape::ALL[..8]
            .iter()
            .map(|s| {
                let mut hits = 0;
                for i in 0..n {
                    for j in 0..n {
                        let u = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
                        let v = -1.0 + (j as f64 + 0.5) * 2.0 / n as f64;
                        hits += s.contains(u, v) as usize;
                    }
                }
                hits as f64 / (n * n) as f64
            })
            .collect();
        for i in 0..areas.len() {
            for j in i + 1..areas.len() {
                assert!((areas[i] - areas[j]).abs() > 0.025, "{areas:?}");
            }
        }
    }

    #[test]
    fn noiseless_background_is_flat() {
        let spec = DatasetSpec {
            noise_level: 0.0,
            object_scale_range: (0.3, 0.3),
            ..small(2)
        };
        let ds = synth_dataset(&spec).unwrap();
        let (im, _) = ds.get(0);
        assert_eq!(im.get(0, 0, 0), BACKGROUND as u8);
    }
}
