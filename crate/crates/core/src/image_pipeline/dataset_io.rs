//! FXDS dataset files: `FXDS`, u32 version (1), u32 count, u32 height,
//! u32 width, u32 channels, u32 num_classes, then per sample a u16 label
//! followed by `height * width * channels` pixel bytes. Little-endian.

use std::path::Path;

use super::image::{Image, LabeledDataset};
use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"FXDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let sample = ds.height() * ds.width() * ds.channels();
    let mut out = Vec::with_capacity(28 + ds.len() * (2 + sample));
    out.extend_from_slice(&DATASET_MAGIC);
    binio::put_u32(&mut out, DATASET_VERSION);
    for (v, what) in [
        (ds.len(), "count"),
        (ds.height(), "height"),
        (ds.width(), "width"),
        (ds.channels(), "channels"),
        (ds.num_classes(), "num_classes"),
    ] {
        binio::put_u32(&mut out, binio::len_u32(v, what)?);
    }
    for (im, &label) in ds.images().iter().zip(ds.labels()) {
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(im.pixels());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("header")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("header")? as usize;
    let height = r.u32("header")? as usize;
    let width = r.u32("header")? as usize;
    let channels = r.u32("header")? as usize;
    let num_classes = r.u32("header")? as usize;
    let sample = binio::checked_product(&[height, width, channels], "sample size")?;
    let record = sample.checked_add(2).ok_or(Error::DimensionOverflow("sample size"))?;
    let body = binio::checked_product(&[count, record], "dataset size")?;
    if r.remaining() < body {
        return Err(Error::Truncated {
            section: "samples",
            expected: body as u64,
            actual: r.remaining() as u64,
        });
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u16("samples")?);
        let px = r.take(sample, "samples")?;
        images.push(Image::new(height, width, channels, px.to_vec())?);
    }
    if r.remaining() != 0 {
        return Err(Error::invalid(format!(
            "{} trailing bytes after dataset",
            r.remaining()
        )));
    }
    LabeledDataset::new(height, width, channels, num_classes, images, labels)
}

pub fn write_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    binio::write_file(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&binio::read_file(path)?)
}
