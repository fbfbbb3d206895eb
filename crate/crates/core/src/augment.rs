//! Paired data augmentation.
//!
//! Geometric transforms (rescale, crop, flips) are drawn once and applied to
//! both images and the label; blur touches the images only. Labels are
//! resampled with nearest neighbour so they stay binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::dataset::ChangePair;
use crate::error::Result;
use crate::tensor::kernels::resize_forward;
use crate::tensor::{ResizeAxis, Tensor};

/// Window `(top, left, height, width)` later resized back to full size.
type Window = (usize, usize, usize, usize);

pub fn augment(pair: &ChangePair, cfg: &AugmentConfig, seed: u64) -> Result<ChangePair> {
    if !cfg.any() {
        return Ok(pair.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = pair.size();

    let (mut wh, mut ww) = (h, w);
    if cfg.rescale && cfg.max_scale > 1.0 {
        let s = rng.gen_range(1.0..=cfg.max_scale);
        wh = ((h as f64 / s).round() as usize).clamp(1, h);
        ww = ((w as f64 / s).round() as usize).clamp(1, w);
    }
    if cfg.crop && cfg.max_crop > 0 {
        let c = rng.gen_range(0..=cfg.max_crop);
        wh = wh.saturating_sub(c).max(1);
        ww = ww.saturating_sub(c).max(1);
    }
    let top = rng.gen_range(0..=h - wh);
    let left = rng.gen_range(0..=w - ww);
    let window = (top, left, wh, ww);

    let hflip = cfg.flip && rng.gen_bool(0.5);
    let vflip = cfg.flip && rng.gen_bool(0.5);
    let blur_sigma = |rng: &mut ChaCha8Rng| {
        (cfg.blur && rng.gen_bool(cfg.blur_probability.clamp(0.0, 1.0)))
            .then(|| rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1].max(cfg.blur_sigma[0])))
    };
    let sigma1 = blur_sigma(&mut rng);
    let sigma2 = blur_sigma(&mut rng);

    let geom = |t: &Tensor<f32>, nearest: bool| -> Result<Tensor<f32>> {
        let mut out = window_resize(t, window, (h, w), nearest)?;
        if hflip {
            out = flip_horizontal(&out)?;
        }
        if vflip {
            out = flip_vertical(&out)?;
        }
        Ok(out)
    };
    let mut t1 = geom(&pair.t1, false)?;
    let mut t2 = geom(&pair.t2, false)?;
    let label = geom(&pair.label, true)?;
    if let Some(s) = sigma1 {
        t1 = gaussian_blur(&t1, s)?;
    }
    if let Some(s) = sigma2 {
        t2 = gaussian_blur(&t2, s)?;
    }
    ChangePair::new(pair.id.clone(), t1, t2, label)
}

/// Splits a `C×H×W` or `H×W` shape into `(channels, h, w)`.
fn planes(t: &Tensor<f32>) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => unreachable!("change pairs hold 2-D or 3-D tensors"),
    }
}

fn window_resize(t: &Tensor<f32>, (top, left, wh, ww): Window, out: (usize, usize), nearest: bool) -> Result<Tensor<f32>> {
    let (c, h, w) = planes(t);
    if (top, left, wh, ww) == (0, 0, h, w) {
        return Ok(t.clone());
    }
    let mut cropped = Vec::with_capacity(c * wh * ww);
    for ch in 0..c {
        for y in top..top + wh {
            let row = ch * h * w + y * w;
            cropped.extend_from_slice(&t.data()[row + left..row + left + ww]);
        }
    }
    let data = if nearest {
        let mut v = Vec::with_capacity(c * out.0 * out.1);
        for ch in 0..c {
            for oy in 0..out.0 {
                let sy = ((oy as f64 + 0.5) * wh as f64 / out.0 as f64) as usize;
                for ox in 0..out.1 {
                    let sx = ((ox as f64 + 0.5) * ww as f64 / out.1 as f64) as usize;
                    v.push(cropped[ch * wh * ww + sy.min(wh - 1) * ww + sx.min(ww - 1)]);
                }
            }
        }
        v
    } else {
        let ay = ResizeAxis::new(wh, out.0);
        let ax = ResizeAxis::new(ww, out.1);
        resize_forward(&cropped, c, (wh, ww), &ay, &ax)
    };
    Tensor::new(t.shape()[..t.shape().len() - 2].iter().copied().chain([out.0, out.1]).collect::<Vec<_>>(), data)
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = planes(t);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), data)
}

pub fn flip_vertical(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = planes(t);
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders and radius `ceil(3σ)`.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if sigma <= 0.0 {
        return Ok(t.clone());
    }
    let (c, h, w) = planes(t);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let src = t.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    acc += k * src[base + y * w + reflect(x as isize + d, w)] as f64;
                }
                tmp[base + y * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    acc += k * tmp[base + reflect(y as isize + d, h) * w + x] as f64;
                }
                out[base + y * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}
