//! Seeded toy real/fake image generator.
//!
//! Real images are smooth composites: a two-colour linear gradient, a few
//! soft-edged blobs and mild Gaussian sensor noise. Fake images come from the
//! same composite process and then carry a period-2 generation artifact at a
//! random phase and amplitude: either a checkerboard or a 2× nearest-neighbour
//! upsampling footprint with a zero-mean 2×2 stencil on top.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::ImageTensor;
use super::manifest::{DatasetManifest, Record, FAKE, REAL};
use crate::error::{LtdError, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::sample_trunc_normal;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Amplitude range of the injected artifact.
pub const ARTIFACT_AMPLITUDE: (f32, f32) = (0.04, 0.10);
const SENSOR_NOISE_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifact {
    Checkerboard,
    Upsampling,
}

impl Artifact {
    pub fn group(self) -> &'static str {
        match self {
            Artifact::Checkerboard => "checkerboard",
            Artifact::Upsampling => "upsampling",
        }
    }
}

/// Smooth composite; `half_res` renders at half size and upsamples 2× by
/// pixel repetition.
fn composite(rng: &mut ChaCha8Rng, size: usize, half_res: bool) -> Vec<f32> {
    let render = if half_res { size.div_ceil(2) } else { size };
    let s = render as f32;
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let theta = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let n_blobs = rng.gen_range(2..=4);
    let blobs: Vec<_> = (0..n_blobs)
        .map(|_| {
            let cx = rng.gen_range(0.0..s);
            let cy = rng.gen_range(0.0..s);
            let r = rng.gen_range(s / 8.0..s / 3.0);
            let alpha = rng.gen_range(0.3..0.8);
            let colour: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
            (cx, cy, r, alpha, colour)
        })
        .collect();
    let soft = (s / 16.0).max(0.5);

    let mut small = vec![0.0f32; render * render * 3];
    for y in 0..render {
        for x in 0..render {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((xf - s / 2.0) * dx + (yf - s / 2.0) * dy) / s + 0.5).clamp(0.0, 1.0);
            let mut px: [f32; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
            for &(cx, cy, r, alpha, colour) in &blobs {
                let dist = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                let m = alpha / (1.0 + ((dist - r) / soft).exp());
                for c in 0..3 {
                    px[c] += (colour[c] - px[c]) * m;
                }
            }
            small[(y * render + x) * 3..(y * render + x) * 3 + 3].copy_from_slice(&px);
        }
    }
    let mut out = if half_res {
        let mut up = vec![0.0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let src = ((y / 2) * render + x / 2) * 3;
                up[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&small[src..src + 3]);
            }
        }
        up
    } else {
        small
    };
    for v in out.iter_mut() {
        *v += (SENSOR_NOISE_STD * sample_trunc_normal(rng)) as f32;
    }
    out
}

fn add_artifact(rng: &mut ChaCha8Rng, data: &mut [f32], size: usize, kind: Artifact) {
    let amp = rng.gen_range(ARTIFACT_AMPLITUDE.0..ARTIFACT_AMPLITUDE.1);
    let py = rng.gen_range(0..2usize);
    let px = rng.gen_range(0..2usize);
    let stencil: [[f32; 2]; 2] = match kind {
        Artifact::Checkerboard => [[1.0, -1.0], [-1.0, 1.0]],
        Artifact::Upsampling => {
            let raw: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mean = raw.iter().sum::<f32>() / 4.0;
            let centred = raw.map(|v| v - mean);
            let peak = centred.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-3);
            let n = centred.map(|v| v / peak);
            [[n[0], n[1]], [n[2], n[3]]]
        }
    };
    for y in 0..size {
        for x in 0..size {
            let a = amp * stencil[(y + py) % 2][(x + px) % 2];
            for c in 0..3 {
                data[(y * size + x) * 3 + c] += a;
            }
        }
    }
}

/// Renders one image of the given class; deterministic in (`seed`, `label`, `index`).
pub fn render(seed: u64, label: u8, index: usize, size: usize) -> Result<(ImageTensor, &'static str)> {
    let mut rng = rng_for(seed, &[stream::SYNTH, label as u64, index as u64]);
    if label == REAL {
        let data = composite(&mut rng, size, false);
        Ok((ImageTensor::new(size, size, data)?, "real"))
    } else {
        let kind = if rng.gen_bool(0.5) {
            Artifact::Checkerboard
        } else {
            Artifact::Upsampling
        };
        let mut data = composite(&mut rng, size, kind == Artifact::Upsampling);
        add_artifact(&mut rng, &mut data, size, kind);
        Ok((ImageTensor::new(size, size, data)?, kind.group()))
    }
}

/// Writes `2·n_per_class` PNGs under `out_dir/{real,fake}/` plus `manifest.jsonl`.
/// Records alternate real, fake, real, ...
pub fn gen_synthetic_dataset(
    n_per_class: usize,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(LtdError::Validation("n_per_class must be at least 1".into()));
    }
    if image_size < 4 {
        return Err(LtdError::Validation(format!("image size {image_size} too small")));
    }
    for sub in ["real", "fake"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| LtdError::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for label in [REAL, FAKE] {
            let (img, group) = render(seed, label, i, image_size)?;
            let sub = if label == REAL { "real" } else { "fake" };
            let rel = PathBuf::from(sub).join(format!("{sub}_{i:05}.png"));
            img.save_png(&out_dir.join(&rel))?;
            records.push(Record {
                path: rel,
                label,
                group: group.to_string(),
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Mean absolute 4-neighbour Laplacian over interior pixels and channels.
pub fn mean_abs_laplacian(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut total = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let lap = img.get(y - 1, x, c) + img.get(y + 1, x, c) + img.get(y, x - 1, c) + img.get(y, x + 1, c)
                    - 4.0 * img.get(y, x, c);
                total += lap.abs() as f64;
            }
        }
    }
    total / ((h - 2) * (w - 2) * 3) as f64
}
