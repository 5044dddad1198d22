//! Resizing, preprocessing and robustness degradations.
//!
//! Every function maps `[0, 1]` images to `[0, 1]` images. Channel
//! normalization with the backbone constants happens inside
//! [`crate::backbone::BackboneWeights::encode_layers`], not here.

use std::io::Cursor;

use ::image::codecs::jpeg::JpegEncoder;
use ::image::ImageFormat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{LtdError, Result};

/// Square resize side and crop side. (256, 224) for full-scale models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessTarget {
    pub resize: usize,
    pub crop: usize,
}

impl PreprocessTarget {
    pub const FULL_SCALE: PreprocessTarget = PreprocessTarget { resize: 256, crop: 224 };

    /// Keeps the 256:224 ratio for a model input of `crop` pixels.
    pub fn for_input(crop: usize) -> Self {
        PreprocessTarget {
            resize: ((crop as f64) * 256.0 / 224.0).round() as usize,
            crop,
        }
    }
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(LtdError::Dimension(format!("resize to {out_h}x{out_w}")));
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let xs = sample_positions(img.width(), out_w);
    let ys = sample_positions(img.height(), out_h);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for ch in 0..3 {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), tx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    ImageTensor::new(out_h, out_w, data)
}

fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

// a + (b − a)·t keeps constants exact
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Square resize to `target.resize`, then a center crop (eval) or a uniform
/// random crop plus a fair-coin horizontal flip (train).
pub fn preprocess<R: Rng + ?Sized>(
    img: &ImageTensor,
    target: PreprocessTarget,
    train: Option<&mut R>,
) -> Result<ImageTensor> {
    if target.crop == 0 || target.crop > target.resize {
        return Err(LtdError::Config(format!("invalid preprocess target {target:?}")));
    }
    let resized = resize_bilinear(img, target.resize, target.resize)?;
    let slack = target.resize - target.crop;
    match train {
        None => {
            let off = slack / 2;
            resized.crop(off, off, target.crop, target.crop)
        }
        Some(rng) => {
            let top = rng.gen_range(0..=slack);
            let left = rng.gen_range(0..=slack);
            let flip = rng.gen_bool(0.5);
            let out = resized.crop(top, left, target.crop, target.crop)?;
            Ok(if flip { out.flip_horizontal() } else { out })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradeSpec {
    Jpeg { quality: u8 },
    Downsample { factor: f32 },
    Blur { kernel: usize, sigma: f32 },
}

impl DegradeSpec {
    pub const DEFAULT_BLUR_SIGMA: f32 = 0.8;

    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradeSpec::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(LtdError::Parameter(format!("JPEG quality {quality} outside 1..=100")))
            }
            DegradeSpec::Downsample { factor } if !(factor > 0.0 && factor <= 1.0) => Err(LtdError::Parameter(
                format!("downsample factor {factor} outside (0, 1]"),
            )),
            DegradeSpec::Blur { kernel, .. } if kernel % 2 == 0 => {
                Err(LtdError::Parameter(format!("blur kernel {kernel} must be odd")))
            }
            DegradeSpec::Blur { sigma, .. } if !(sigma > 0.0) => {
                Err(LtdError::Parameter(format!("blur sigma {sigma} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.validate()?;
        match *self {
            DegradeSpec::Jpeg { quality } => degrade_jpeg(img, quality),
            DegradeSpec::Downsample { factor } => degrade_downsample(img, factor),
            DegradeSpec::Blur { kernel, sigma } => degrade_blur(img, kernel, sigma),
        }
    }
}

/// Applies degradations in order; an empty list is the identity.
pub fn apply_degradations(img: &ImageTensor, specs: &[DegradeSpec]) -> Result<ImageTensor> {
    let mut out = img.clone();
    for s in specs {
        out = s.apply(&out)?;
    }
    Ok(out)
}

/// Baseline JPEG round trip at `quality`.
pub fn degrade_jpeg(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    DegradeSpec::Jpeg { quality }.validate()?;
    let mut buf = Cursor::new(Vec::new());
    let rgb = img.to_rgb8();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| LtdError::Codec(format!("JPEG encode: {e}")))?;
    let decoded = ::image::load_from_memory_with_format(buf.get_ref(), ImageFormat::Jpeg)
        .map_err(|e| LtdError::Codec(format!("JPEG decode: {e}")))?;
    ImageTensor::from_rgb8(&decoded.to_rgb8())
}

/// Bilinear resize to `(⌊h·f⌋, ⌊w·f⌋)`.
pub fn degrade_downsample(img: &ImageTensor, factor: f32) -> Result<ImageTensor> {
    DegradeSpec::Downsample { factor }.validate()?;
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let h = (img.height() as f64 * factor as f64).floor() as usize;
    let w = (img.width() as f64 * factor as f64).floor() as usize;
    if h < 1 || w < 1 {
        return Err(LtdError::Dimension(format!(
            "downsampling {}x{} by {factor} leaves {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    resize_bilinear(img, h, w)
}

/// Normalized 1-D Gaussian weights, centre tap at index `kernel / 2`.
pub fn gaussian_kernel(kernel: usize, sigma: f32) -> Result<Vec<f32>> {
    DegradeSpec::Blur { kernel, sigma }.validate()?;
    let r = (kernel / 2) as i64;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / s2).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| (v / z) as f32).collect())
}

/// Separable Gaussian blur with mirrored borders (`dcb|abcd|cba`).
pub fn degrade_blur(img: &ImageTensor, kernel: usize, sigma: f32) -> Result<ImageTensor> {
    let w = gaussian_kernel(kernel, sigma)?;
    let (h, wd) = (img.height(), img.width());
    let r = (kernel / 2) as i64;
    let horiz = convolve(img.data(), h, wd, &w, r, |y, x, d| (y, reflect(x as i64 + d, wd)));
    let vert = convolve(&horiz, h, wd, &w, r, |y, x, d| (reflect(y as i64 + d, h), x));
    ImageTensor::new(h, wd, vert)
}

// out = x₀ + Σ wᵢ(xᵢ − x₀), equal to Σ wᵢxᵢ when Σwᵢ = 1 and exact on flat regions
fn convolve(
    src: &[f32],
    h: usize,
    w: usize,
    weights: &[f32],
    r: i64,
    at: impl Fn(usize, usize, i64) -> (usize, usize),
) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let centre = src[(y * w + x) * 3 + ch];
                let mut acc = 0.0f32;
                for (k, &wk) in weights.iter().enumerate() {
                    let d = k as i64 - r;
                    if d == 0 {
                        continue;
                    }
                    let (yy, xx) = at(y, x, d);
                    acc += wk * (src[(yy * w + xx) * 3 + ch] - centre);
                }
                out[(y * w + x) * 3 + ch] = centre + acc;
            }
        }
    }
    out
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}
