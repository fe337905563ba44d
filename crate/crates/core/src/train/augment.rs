use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, nearest_resize_labels, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub crop_hw: (usize, usize),
    pub hflip_p: f64,
    pub ignore_index: u8,
}

impl AugmentConfig {
    /// No-op augmentation for `h`×`w` inputs.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentConfig {
            scale_range: (1.0, 1.0),
            crop_hw: (h, w),
            hflip_p: 0.0,
            ignore_index: 255,
        }
    }
}

/// Random scale (bilinear image, nearest labels), random crop, random flip.
///
/// The image is (1, c, h, w) and `label` is h×w. Regions the crop takes from
/// outside the scaled image are filled with the per-channel image mean and
/// `ignore_index`. Exactly four draws are consumed from `rng` per call.
pub fn augment<T: Scalar, R: Rng>(
    image: &Tensor<T>,
    label: &[u8],
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let s = image.shape();
    if s.n != 1 || label.len() != s.h * s.w {
        return Err(Error::invalid(
            "augment",
            format!("image {s} does not pair with {} labels", label.len()),
        ));
    }
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
    }
    let u: f64 = rng.random();
    let fy: f64 = rng.random();
    let fx: f64 = rng.random();
    let flip = rng.random::<f64>() < cfg.hflip_p;

    let scale = lo + (hi - lo) * u;
    let sh = ((s.h as f64 * scale).round() as usize).max(1);
    let sw = ((s.w as f64 * scale).round() as usize).max(1);
    let img = bilinear_resize(image, sh, sw)?;
    let lab = nearest_resize_labels(label, s.h, s.w, sh, sw);

    let (ch, cw) = cfg.crop_hw;
    // offsets may be negative when the scaled image is smaller than the crop
    let off = |full: usize, crop: usize, f: f64| -> isize {
        if full >= crop {
            ((full - crop + 1) as f64 * f).floor().min((full - crop) as f64) as isize
        } else {
            -(((crop - full + 1) as f64 * f).floor().min((crop - full) as f64) as isize)
        }
    };
    let (oy, ox) = (off(sh, ch, fy), off(sw, cw, fx));
    let plane = sh * sw;
    let means: Vec<T> = (0..s.c)
        .map(|c| img.data()[c * plane..(c + 1) * plane].iter().copied().sum::<T>() / T::lit(plane as f64))
        .collect();
    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let (yy, xx) = (y as isize + oy, x as isize + ox);
        (yy >= 0 && xx >= 0 && (yy as usize) < sh && (xx as usize) < sw).then_some((yy as usize, xx as usize))
    };
    let mut out = Tensor::from_fn(Shape::new(1, s.c, ch, cw), |[_, c, y, x]| match src(y, x) {
        Some((yy, xx)) => img.data()[c * plane + yy * sw + xx],
        None => means[c],
    });
    let mut out_lab = vec![cfg.ignore_index; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            if let Some((yy, xx)) = src(y, x) {
                out_lab[y * cw + x] = lab[yy * sw + xx];
            }
        }
    }
    if flip {
        out = out.flip_w();
        for row in out_lab.chunks_mut(cw) {
            row.reverse();
        }
    }
    Ok((out, out_lab))
}
