//! Train-time and test-time pre-processing, bilinear resampling, the
//! procedural shapes dataset and its file format.

mod augment;
mod dataset_io;
mod image;
mod resize;
mod synth;

pub use augment::{
    center_crop_preproc, random_resized_crop, sample_roc, AugmentConfig, RoC, TestPreproc,
    ROC_ATTEMPTS,
};
pub use dataset_io::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use image::{Image, LabeledDataset};
pub use resize::resize_bilinear;
pub use synth::{synth_dataset, DatasetSpec, Shape};

/// Per-pixel normalisation applied when images become network input.
pub const PIXEL_MEAN: f64 = 0.16;
pub const PIXEL_STD: f64 = 0.25;
