//! Adjacent-layer consistency profiles and feature export.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneWeights, LayerFeatures};
use crate::data::{DatasetManifest, FAKE};
use crate::error::{LtdError, Result};
use crate::pipeline::manifest_features;

/// Cosine similarity clamped to [−1, 1]; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    // sqrt(aa·bb) is exact for a == b, so identical rows give exactly 1
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = y as f64 - x as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `(cos, L2)` for every adjacent pair `(k, k+1)`.
pub fn adjacent_stats(features: &LayerFeatures) -> Vec<(f64, f64)> {
    (0..features.layers() - 1)
        .map(|k| {
            let (a, b) = (features.row(k), features.row(k + 1));
            (cosine(a, b), l2_distance(a, b))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    /// `all`, `real` or `fake`.
    pub class: String,
    /// Lower layer of the pair.
    pub layer: usize,
    pub count: usize,
    pub cos_mean: f64,
    pub cos_std: f64,
    pub l2_mean: f64,
    pub l2_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerProfile {
    pub rows: Vec<ProfileRow>,
}

/// Population mean and standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl LayerProfile {
    /// Aggregates per-image stats (in the given order) over all images and,
    /// when `per_class`, over each class present.
    pub fn aggregate(stats: &[Vec<(f64, f64)>], labels: &[u8], per_class: bool) -> Result<Self> {
        if stats.is_empty() {
            return Err(LtdError::Validation("empty manifest".into()));
        }
        let mut classes: Vec<(&str, Vec<usize>)> = vec![("all", (0..stats.len()).collect())];
        if per_class {
            for (name, label) in [("real", 0u8), ("fake", FAKE)] {
                let idx: Vec<usize> = (0..stats.len()).filter(|&i| labels[i] == label).collect();
                if !idx.is_empty() {
                    classes.push((name, idx));
                }
            }
        }
        let pairs = stats[0].len();
        let mut rows = Vec::new();
        for (name, idx) in classes {
            #[allow(clippy::needless_range_loop)]
            for k in 0..pairs {
                let cos: Vec<f64> = idx.iter().map(|&i| stats[i][k].0).collect();
                let l2: Vec<f64> = idx.iter().map(|&i| stats[i][k].1).collect();
                let (cos_mean, cos_std) = mean_std(&cos);
                let (l2_mean, l2_std) = mean_std(&l2);
                rows.push(ProfileRow {
                    class: name.to_string(),
                    layer: k,
                    count: idx.len(),
                    cos_mean,
                    cos_std,
                    l2_mean,
                    l2_std,
                });
            }
        }
        Ok(LayerProfile { rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| LtdError::Codec(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| LtdError::Codec(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| LtdError::Parse {
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(LayerProfile { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv()?.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| LtdError::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| LtdError::io(path, e))?;
    f.write_all(bytes).map_err(|e| LtdError::io(path, e))
}

pub fn layer_profiles(backbone: &BackboneWeights, manifest: &DatasetManifest, per_class: bool) -> Result<LayerProfile> {
    let feats = manifest_features(backbone, manifest, &[])?;
    let stats: Vec<_> = feats.iter().map(adjacent_stats).collect();
    LayerProfile::aggregate(&stats, &manifest.labels(), per_class)
}

/// One exported vector: a layer's CLS token, or the difference to the next layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub path: String,
    pub label: u8,
    pub layer: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// Header `path,label,layer,dim_0..dim_{D−1}`; values in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let width = self.rows.first().map_or(0, |r| r.values.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["path".to_string(), "label".into(), "layer".into()];
        header.extend((0..width).map(|i| format!("dim_{i}")));
        let codec = |e: csv::Error| LtdError::Codec(e.to_string());
        w.write_record(&header).map_err(codec)?;
        for r in &self.rows {
            let mut rec = vec![r.path.clone(), r.label.to_string(), r.layer.to_string()];
            rec.extend(r.values.iter().map(f32::to_string));
            w.write_record(&rec).map_err(codec)?;
        }
        let bytes = w.into_inner().map_err(|e| LtdError::Codec(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let perr = |m: String| LtdError::Parse { line, message: m };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if rec.len() < 3 {
                return Err(perr(format!("{} columns", rec.len())));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|e| perr(format!("{s:?}: {e}")));
            rows.push(FeatureRow {
                path: rec[0].to_string(),
                label: rec[1].parse().map_err(|e| perr(format!("label: {e}")))?,
                layer: rec[2].parse().map_err(|e| perr(format!("layer: {e}")))?,
                values: rec.iter().skip(3).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(FeatureTable { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut s))
            .map_err(|e| LtdError::io(path, e))?;
        Self::from_csv(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv()?.as_bytes())
    }
}

/// Rows per (image, layer). With `diff`, layer `k` holds `f⁽ᵏ⁺¹⁾ − f⁽ᵏ⁾`.
pub fn feature_table(
    features: &[LayerFeatures],
    manifest: &DatasetManifest,
    layers: &[usize],
    diff: bool,
) -> Result<FeatureTable> {
    let mut rows = Vec::with_capacity(features.len() * layers.len());
    for (f, rec) in features.iter().zip(manifest.records()) {
        let limit = if diff { f.layers() - 1 } else { f.layers() };
        for &k in layers {
            if k >= limit {
                return Err(LtdError::Validation(format!(
                    "layer {k} out of range ({limit} available{})",
                    if diff { " for differences" } else { "" }
                )));
            }
            let values = if diff {
                f.row(k + 1).iter().zip(f.row(k)).map(|(b, a)| b - a).collect()
            } else {
                f.row(k).to_vec()
            };
            rows.push(FeatureRow {
                path: rec.path.to_string_lossy().into_owned(),
                label: rec.label,
                layer: k,
                values,
            });
        }
    }
    Ok(FeatureTable { rows })
}

pub fn export_features(
    backbone: &BackboneWeights,
    manifest: &DatasetManifest,
    layers: &[usize],
    diff: bool,
    out_path: &Path,
) -> Result<FeatureTable> {
    let depth = backbone.config().depth;
    if let Some(&k) = layers.iter().find(|&&k| k >= depth || (diff && k + 1 >= depth)) {
        return Err(LtdError::Validation(format!(
            "layer {k} out of range for depth {depth}"
        )));
    }
    let feats = manifest_features(backbone, manifest, &[])?;
    let table = feature_table(&feats, manifest, layers, diff)?;
    table.save(out_path)?;
    Ok(table)
}
