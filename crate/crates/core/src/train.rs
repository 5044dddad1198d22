//! BCE training of the head over a frozen backbone, checkpoints and evaluation.
//!
//! Every random draw (shuffle, crop/flip, Gumbel noise) comes from a generator
//! keyed by (seed, stream, epoch, index). Per-image gradients are computed in
//! parallel and summed in batch order, so the trajectory does not depend on
//! the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::autodiff::{bce_value, sigmoid, Tape};
use crate::backbone::{BackboneWeights, LayerFeatures};
use crate::data::{DatasetManifest, DegradeSpec, ImageTensor, FAKE, REAL};
use crate::error::{LtdError, Result};
use crate::head::{forward_head, infer_logits, sample_gumbel, HeadConfig, LtdHeadParams, NoiseScope, Selection};
use crate::metrics::{MetricsReport, MetricsSummary, ScoreEntry};
use crate::optim::{AdamConfig, AdamState};
use crate::pipeline::{eval_features, image_features, manifest_features};
use crate::rng::{rng_for, stream};

/// Stable BCE-with-logits, `max(z,0) − z·y + ln(1+e^{−|z|})`.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    bce_value(logit, label as f64)
}

/// `∂L/∂z = sigmoid(z) − y`.
pub fn bce_grad(logit: f64, label: u8) -> f64 {
    sigmoid(logit) - label as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Encode each image once, without augmentation.
    pub feature_cache: bool,
    /// Global gradient-norm clip; none by default.
    #[serde(default)]
    pub grad_clip: Option<f32>,
    pub head: HeadConfig,
}

impl TrainConfig {
    /// Toy defaults: lr 5e-5, batch 32, 5 epochs.
    pub fn toy(head: HeadConfig) -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            feature_cache: false,
            grad_clip: None,
            head,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(LtdError::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LtdError::Config("batch size and epochs must be ≥ 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(LtdError::Config(format!("gradient clip {c} must be > 0")));
            }
        }
        self.head.validate(depth)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_ap: Option<f64>,
    pub selected_window_start: usize,
}

/// Complete training state: enough to continue the run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub head: LtdHeadParams<f32>,
    pub optim: AdamState,
    pub history: Vec<EpochLog>,
    /// Head with the best validation accuracy so far (ties keep the earlier epoch).
    pub best_head: LtdHeadParams<f32>,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub backbone_hash: String,
}

const BEST_PREFIX: &str = "best/";
const M_PREFIX: &str = "optim/m/";
const V_PREFIX: &str = "optim/v/";

impl Checkpoint {
    /// Fresh state for `config`: seeded head init and zero optimizer moments.
    pub fn initial(config: &TrainConfig, backbone: &BackboneWeights) -> Result<Self> {
        config.validate(backbone.config().depth)?;
        check_width(&config.head, backbone)?;
        let head = LtdHeadParams::init(&config.head, &mut rng_for(config.seed, &[stream::HEAD_INIT]));
        let optim = AdamState::new(config.adam(), &head.sizes())?;
        Ok(Checkpoint {
            config: config.clone(),
            epoch: 0,
            best_head: head.clone(),
            head,
            optim,
            history: Vec::new(),
            best_epoch: 0,
            best_val_acc: None,
            backbone_hash: backbone.content_hash().to_string(),
        })
    }

    /// Trainable scalars touched by the optimizer.
    pub fn optimizer_param_count(&self) -> usize {
        self.optim.m.iter().map(Vec::len).sum()
    }

    pub fn meta_json(&self) -> serde_json::Value {
        json!({
            "train": self.config,
            "epoch": self.epoch,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "adam": self.optim.config,
            "adam_t": self.optim.t,
            "backbone_hash": self.backbone_hash,
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(self.meta_json(), None);
        self.head.to_archive_into(&mut a);
        for ((name, t), (m, v)) in self
            .head
            .named()
            .into_iter()
            .zip(self.optim.m.iter().zip(&self.optim.v))
        {
            let short = &name[crate::head::params::PREFIX.len()..];
            let shape = t.shape().to_vec();
            a.insert(
                format!("{M_PREFIX}{short}"),
                &crate::tensor::Tensor::new(shape.clone(), m.clone()).expect("shape"),
            );
            a.insert(
                format!("{V_PREFIX}{short}"),
                &crate::tensor::Tensor::new(shape, v.clone()).expect("shape"),
            );
        }
        for (name, t) in self.best_head.named() {
            a.insert(
                format!("{BEST_PREFIX}{}", &name[crate::head::params::PREFIX.len()..]),
                t,
            );
        }
        a
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let meta = a.config.clone();
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| LtdError::Config(format!("checkpoint missing {k}")))
        };
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let bad = |e: serde_json::Error| LtdError::Config(format!("checkpoint metadata: {e}"));
        let config: TrainConfig = serde_json::from_value(parse("train")?).map_err(bad)?;
        let epoch: usize = serde_json::from_value(parse("epoch")?).map_err(bad)?;
        let history: Vec<EpochLog> = serde_json::from_value(parse("history")?).map_err(bad)?;
        let best_epoch: usize = serde_json::from_value(parse("best_epoch")?).map_err(bad)?;
        let best_val_acc: Option<f64> = serde_json::from_value(parse("best_val_acc")?).map_err(bad)?;
        let adam: AdamConfig = serde_json::from_value(parse("adam")?).map_err(bad)?;
        let adam_t: u64 = serde_json::from_value(parse("adam_t")?).map_err(bad)?;
        let backbone_hash: String = serde_json::from_value(parse("backbone_hash")?).map_err(bad)?;

        let head = LtdHeadParams::from_archive(&config.head, &mut a, crate::head::params::PREFIX)?;
        let best_head = LtdHeadParams::from_archive(&config.head, &mut a, BEST_PREFIX)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in head.named() {
            let short = &name[crate::head::params::PREFIX.len()..];
            m.push(a.take(&format!("{M_PREFIX}{short}"), t.shape())?.into_data());
            v.push(a.take(&format!("{V_PREFIX}{short}"), t.shape())?.into_data());
        }
        a.expect_consumed("")?;
        Ok(Checkpoint {
            config,
            epoch,
            head,
            optim: AdamState {
                config: adam,
                t: adam_t,
                m,
                v,
            },
            history,
            best_head,
            best_epoch,
            best_val_acc,
            backbone_hash,
        })
    }

    /// Writes the archive and a `.json` sidecar with the metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)?;
        let side = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.meta_json()).expect("metadata serializes");
        std::fs::write(&side, text).map_err(|e| LtdError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

fn check_width(head: &HeadConfig, backbone: &BackboneWeights) -> Result<()> {
    let bc = backbone.config();
    if head.width != bc.width {
        return Err(LtdError::Config(format!(
            "head width {} does not match backbone width {}",
            head.width, bc.width
        )));
    }
    head.validate(bc.depth)
}

enum TrainInputs {
    Cached(Vec<LayerFeatures>),
    Images(Vec<ImageTensor>),
}

fn load_images(manifest: &DatasetManifest) -> Result<Vec<ImageTensor>> {
    manifest
        .records()
        .par_iter()
        .map(|r| ImageTensor::load(&manifest.resolve(r)))
        .collect()
}

/// Per-image loss and gradients in parameter order.
fn image_step(
    head: &LtdHeadParams<f32>,
    features: &LayerFeatures,
    label: u8,
    gumbel: &[f64],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let out = forward_head(&mut tape, head, features, Selection::Train { gumbel })?;
    let loss = tape.bce_with_logits(out.logit, label as f32)?;
    let grads = tape.backward(loss)?;
    let per_param = out.vars.flat().into_iter().map(|v| grads.wrt(v, &tape)).collect();
    Ok((tape.value(loss).data()[0] as f64, per_param))
}

fn validation(head: &LtdHeadParams<f32>, feats: &[LayerFeatures], labels: &[u8]) -> Result<MetricsSummary> {
    let logits = infer_logits(head, feats)?;
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z as f64)).collect();
    MetricsSummary::compute(&scores, labels, 0.5)
}

fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn diverged(epoch: usize, reason: String, last_good: &Checkpoint) -> LtdError {
    LtdError::Diverged {
        epoch,
        reason,
        last_good: Box::new(last_good.clone()),
    }
}

/// Trains from scratch. `on_epoch` sees the state after every epoch.
pub fn train(
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    backbone: &BackboneWeights,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&Checkpoint, &EpochLog) -> Result<()>,
) -> Result<Checkpoint> {
    let start = Checkpoint::initial(config, backbone)?;
    resume(start, train_manifest, val_manifest, backbone, on_epoch)
}

/// Continues `state` up to `state.config.epochs`.
pub fn resume(
    mut state: Checkpoint,
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    backbone: &BackboneWeights,
    on_epoch: &mut dyn FnMut(&Checkpoint, &EpochLog) -> Result<()>,
) -> Result<Checkpoint> {
    let cfg = state.config.clone();
    cfg.validate(backbone.config().depth)?;
    check_width(&cfg.head, backbone)?;
    if state.backbone_hash != backbone.content_hash() {
        return Err(LtdError::Config(
            "checkpoint was trained against a different backbone".into(),
        ));
    }
    backbone.verify_hash()?;
    let (n_real, n_fake) = train_manifest.label_counts();
    if n_real == 0 || n_fake == 0 {
        return Err(LtdError::Validation(format!(
            "training data needs both classes (real {n_real}, fake {n_fake})"
        )));
    }
    let labels = train_manifest.labels();
    let inputs = if cfg.feature_cache {
        TrainInputs::Cached(manifest_features(backbone, train_manifest, &[])?)
    } else {
        TrainInputs::Images(load_images(train_manifest)?)
    };
    let val = match val_manifest {
        Some(m) => Some((manifest_features(backbone, m, &[])?, m.labels())),
        None => None,
    };
    let n = labels.len();
    let c_len = cfg.head.candidates();

    while state.epoch < cfg.epochs {
        let e = state.epoch as u64;
        let last_good = state.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, e]));
        let mut loss_sum = 0.0f64;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_noise = sample_gumbel(&mut rng_for(cfg.seed, &[stream::GUMBEL, e, 1, b as u64]), c_len);
            let head = &state.head;
            let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let feats = match &inputs {
                        TrainInputs::Cached(f) => f[i].clone(),
                        TrainInputs::Images(imgs) => {
                            let mut rng = rng_for(cfg.seed, &[stream::AUGMENT, e, i as u64]);
                            image_features(backbone, &imgs[i], &[], Some(&mut rng))?
                        }
                    };
                    let noise = match cfg.head.noise {
                        NoiseScope::PerImage => {
                            sample_gumbel(&mut rng_for(cfg.seed, &[stream::GUMBEL, e, 0, i as u64]), c_len)
                        }
                        NoiseScope::PerBatch => batch_noise.clone(),
                    };
                    image_step(head, &feats, labels[i], &noise)
                })
                .collect();

            let scale = 1.0 / batch.len() as f32;
            let mut total: Option<Vec<Vec<f32>>> = None;
            for r in results {
                let (loss, grads) = match r {
                    Ok(v) => v,
                    Err(LtdError::Numeric(msg)) => return Err(diverged(state.epoch + 1, msg, &last_good)),
                    Err(other) => return Err(other),
                };
                if !loss.is_finite() {
                    return Err(diverged(state.epoch + 1, "non-finite loss".into(), &last_good));
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => {
                        for (acc, g) in t.iter_mut().zip(&grads) {
                            for (a, &x) in acc.iter_mut().zip(g) {
                                *a += x;
                            }
                        }
                    }
                }
            }
            let mut total = total.expect("non-empty batch");
            for g in total.iter_mut().flatten() {
                *g *= scale;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = total
                    .iter()
                    .flatten()
                    .map(|&g| (g as f64) * (g as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip as f64 {
                    let s = (clip as f64 / norm) as f32;
                    total.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            let mut params = state.head.tensors_mut();
            for (p, g) in params.iter_mut().zip(&total) {
                p.zero_grad();
                p.accumulate_grad(g)?;
            }
            if let Err(err) = state.optim.step(&mut params) {
                return match err {
                    LtdError::Numeric(msg) => Err(diverged(state.epoch + 1, msg, &last_good)),
                    other => Err(other),
                };
            }
            for p in params.iter_mut() {
                p.zero_grad();
            }
        }
        backbone.verify_hash()?;
        state.epoch += 1;

        let (val_acc, val_ap) = match &val {
            Some((feats, vl)) => {
                let s = validation(&state.head, feats, vl)?;
                (Some(s.acc_overall), s.ap)
            }
            None => (None, None),
        };
        let improved = match (val_acc, state.best_val_acc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            state.best_head = state.head.clone();
            state.best_epoch = state.epoch;
            state.best_val_acc = val_acc;
        }
        let log = EpochLog {
            epoch: state.epoch,
            train_loss: loss_sum / n as f64,
            val_acc,
            val_ap,
            selected_window_start: argmax_f32(state.head.pi.data()),
        };
        log::info!(
            "epoch {} loss {:.6} val_acc {:?} val_ap {:?} window {}",
            log.epoch,
            log.train_loss,
            log.val_acc,
            log.val_ap,
            log.selected_window_start
        );
        state.history.push(log.clone());
        on_epoch(&state, &log)?;
    }
    Ok(state)
}

/// Infer-mode scores from the checkpoint's best head, degradations first.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    backbone: &BackboneWeights,
    degrade: &[DegradeSpec],
) -> Result<MetricsReport> {
    evaluate_head(&checkpoint.best_head, manifest, backbone, degrade)
}

pub fn evaluate_head(
    head: &LtdHeadParams<f32>,
    manifest: &DatasetManifest,
    backbone: &BackboneWeights,
    degrade: &[DegradeSpec],
) -> Result<MetricsReport> {
    check_width(&head.config, backbone)?;
    for d in degrade {
        d.validate()?;
    }
    let feats = manifest_features(backbone, manifest, degrade)?;
    let logits = infer_logits(head, &feats)?;
    let entries = manifest
        .records()
        .iter()
        .zip(&logits)
        .map(|(r, &z)| ScoreEntry {
            path: r.path.to_string_lossy().into_owned(),
            score: sigmoid(z as f64),
            label: r.label,
            group: r.group.clone(),
        })
        .collect();
    MetricsReport::from_scores(entries, 0.5)
}

/// `(probability, label)` for a single image file.
pub fn score_image(head: &LtdHeadParams<f32>, backbone: &BackboneWeights, image: &ImageTensor) -> Result<(f64, u8)> {
    check_width(&head.config, backbone)?;
    let feats = eval_features(backbone, image, &[])?;
    let z = crate::head::infer_logit(head, &feats)?;
    let (p, label) = crate::head::predict(z as f64, 0.5)?;
    debug_assert!(label == FAKE || label == REAL);
    Ok((p, label))
}
