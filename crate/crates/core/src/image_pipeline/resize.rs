use super::image::Image;
use crate::error::{Error, Result};

/// Source sample position and blend weight along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre taps: `src = (dst + 0.5) * in / out - 0.5`, clamped
/// to `[0, in - 1]`.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and border clamping.
/// Each channel is interpolated independently in f64 and rounded to the
/// nearest integer, ties away from zero.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (image.height(), image.width()) {
        return Ok(image.clone());
    }
    let c = image.channels();
    let ys = taps(image.height(), out_h);
    let xs = taps(image.width(), out_w);
    let src = image.pixels();
    let row = image.width() * c;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for ty in &ys {
        let r0 = &src[ty.lo * row..(ty.lo + 1) * row];
        let r1 = &src[ty.hi * row..(ty.hi + 1) * row];
        for tx in &xs {
            for ch in 0..c {
                let p00 = r0[tx.lo * c + ch] as f64;
                let p01 = r0[tx.hi * c + ch] as f64;
                let p10 = r1[tx.lo * c + ch] as f64;
                let p11 = r1[tx.hi * c + ch] as f64;
                let top = p00 + (p01 - p00) * tx.frac;
                let bottom = p10 + (p11 - p10) * tx.frac;
                let v = top + (bottom - top) * ty.frac;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}
