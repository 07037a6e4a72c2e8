//! Random image transformations: resized crop, horizontal flip, colour
//! jitter and random grayscale, applied in that order.
//!
//! Colour jitter applies brightness, contrast, saturation and hue in this
//! fixed order, each with a factor drawn uniformly from its range:
//!
//! - brightness `f`: `x * f`
//! - contrast `f`: `f * x + (1 - f) * mean(gray(x))`
//! - saturation `f`: `f * x + (1 - f) * gray(x)` per pixel
//! - hue `h`: rotation of the (I, Q) chroma plane of YIQ by `2 * pi * h`
//!
//! with `gray = 0.299 R + 0.587 G + 0.114 B`. Values are clamped to `[0, 1]`
//! after every step. Single-channel images skip jitter and grayscale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Probability of applying the jitter at all.
    pub p: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            p: 0.8,
        }
    }
}

/// Absent fields are disabled, so an empty table is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropParams>,
    #[serde(default)]
    pub flip_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<ColorJitter>,
    #[serde(default)]
    pub grayscale_p: f64,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self::standard()
    }
}

impl Pipeline {
    pub fn standard() -> Self {
        Self {
            crop: Some(CropParams::default()),
            flip_p: 0.5,
            jitter: Some(ColorJitter::default()),
            grayscale_p: 0.2,
        }
    }

    pub fn identity() -> Self {
        Self {
            crop: None,
            flip_p: 0.0,
            jitter: None,
            grayscale_p: 0.0,
        }
    }
}

/// Transforms one `[c, h, w]` image. The random stream depends only on
/// `(seed, index)`.
pub fn augment<S: Scalar>(img: &[S], shape: &[usize], pipeline: &Pipeline, seed: u64, index: u64) -> Result<Vec<S>> {
    let &[c, h, w] = shape else {
        return Err(DataError::Invalid(format!("expected a [c, h, w] image, got {shape:?}")));
    };
    if c != 1 && c != 3 {
        return Err(DataError::Channels(c));
    }
    if img.len() != c * h * w {
        return Err(DataError::Invalid(format!("{} values for shape {shape:?}", img.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut x: Vec<f64> = img.iter().map(|v| v.as_f64()).collect();

    if let Some(crop) = &pipeline.crop {
        let (top, left, ch, cw) = crop_box(&mut rng, crop, h, w);
        x = resized_crop(&x, c, h, w, top, left, ch, cw);
    }
    if pipeline.flip_p > 0.0 && rng.gen::<f64>() < pipeline.flip_p {
        flip(&mut x, c, h, w);
    }
    if c == 3 {
        if let Some(j) = &pipeline.jitter {
            if rng.gen::<f64>() < j.p {
                jitter(&mut x, h * w, j, &mut rng);
            }
        }
        if pipeline.grayscale_p > 0.0 && rng.gen::<f64>() < pipeline.grayscale_p {
            grayscale(&mut x, h * w);
        }
    }
    Ok(x.into_iter().map(S::lit).collect())
}

/// Samples a crop box `(top, left, height, width)` with area and aspect
/// ratio in range; falls back to the largest centred box after ten tries.
fn crop_box(rng: &mut ChaCha8Rng, p: &CropParams, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(p.scale.0..=p.scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < p.ratio.0 {
        (((w as f64) / p.ratio.0).round() as usize, w)
    } else if in_ratio > p.ratio.1 {
        (h, ((h as f64) * p.ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resize of the crop back to `h x w`, sampling at pixel centres.
#[allow(clippy::too_many_arguments)]
fn resized_crop(x: &[f64], c: usize, h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f64> {
    let axis = |out: usize, src: usize, n: usize| {
        let s = ((out as f64 + 0.5) * src as f64 / n as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| axis(y, ch, h)).collect();
    let xs: Vec<_> = (0..w).map(|x| axis(x, cw, w)).collect();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let at = |r: usize, col: usize| plane[(top + r) * w + left + col];
        for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (xo, &(x0, x1, wx)) in xs.iter().enumerate() {
                let a = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let b = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[ci * h * w + y * w + xo] = a * (1.0 - wy) + b * wy;
            }
        }
    }
    out
}

fn flip(x: &mut [f64], c: usize, h: usize, w: usize) {
    for row in x.chunks_mut(w).take(c * h) {
        row.reverse();
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp_all(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn factor(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    rng.gen_range((1.0 - spread).max(0.0)..=1.0 + spread)
}

fn jitter(x: &mut [f64], n: usize, j: &ColorJitter, rng: &mut ChaCha8Rng) {
    let fb = factor(rng, j.brightness);
    let fc = factor(rng, j.contrast);
    let fs = factor(rng, j.saturation);
    let hue = rng.gen_range(-j.hue..=j.hue);

    x.iter_mut().for_each(|v| *v *= fb);
    clamp_all(x);

    let mean = (0..n).map(|i| gray(x[i], x[n + i], x[2 * n + i])).sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v = fc * *v + (1.0 - fc) * mean);
    clamp_all(x);

    for i in 0..n {
        let gv = gray(x[i], x[n + i], x[2 * n + i]);
        for ch in 0..3 {
            let v = &mut x[ch * n + i];
            *v = fs * *v + (1.0 - fs) * gv;
        }
    }
    clamp_all(x);

    let (sin, cos) = (2.0 * std::f64::consts::PI * hue).sin_cos();
    for i in 0..n {
        let (r, g, b) = (x[i], x[n + i], x[2 * n + i]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let ci = 0.596 * r - 0.274 * g - 0.322 * b;
        let cq = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (ci * cos - cq * sin, ci * sin + cq * cos);
        x[i] = y + 0.956 * i2 + 0.621 * q2;
        x[n + i] = y - 0.272 * i2 - 0.647 * q2;
        x[2 * n + i] = y - 1.106 * i2 + 1.703 * q2;
    }
    clamp_all(x);
}

fn grayscale(x: &mut [f64], n: usize) {
    for i in 0..n {
        let gv = gray(x[i], x[n + i], x[2 * n + i]);
        x[i] = gv;
        x[n + i] = gv;
        x[2 * n + i] = gv;
    }
}
