//! Frozen Vision Transformer encoder that returns the CLS token after every layer.
//!
//! Forward: split the normalized image into `p×p` patches, flatten each patch
//! in `[row][col][channel]` order, project to `D`, prepend the class token,
//! add positional embeddings, optionally apply the pre-transformer layer norm
//! (CLIP's `ln_pre`), then run `depth` pre-norm blocks. Row `k` of the output
//! is the CLS token after block `k`, post-residual and before any final norm.
//!
//! Converted CLIP checkpoints must store linear weights as `[in, out]` and the
//! patch projection as `[3·p·p, D]` in the patch order above.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::{content_hash, Archive, NormConstants};
use crate::block::{layer_norm_rows, Activation, BlockParams, BlockShape};
use crate::data::ImageTensor;
use crate::error::{ArchiveError, LtdError, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub ln_pre: bool,
    #[serde(default)]
    pub patch_bias: bool,
}

fn yes() -> bool {
    true
}

impl BackboneConfig {
    /// Desk-scale default: 56 px input, 14 px patches, 8 layers of width 32.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: 56,
            patch_size: 14,
            depth: 8,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            ln_pre: true,
            patch_bias: false,
        }
    }

    /// CLIP ViT-L/14 image tower.
    pub fn clip_vit_l14() -> Self {
        BackboneConfig {
            image_size: 224,
            patch_size: 14,
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4,
            activation: Activation::QuickGelu,
            ln_pre: true,
            patch_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(LtdError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth < 2 {
            return Err(LtdError::Config(format!("depth {} < 2", self.depth)));
        }
        if self.mlp_ratio == 0 {
            return Err(LtdError::Config("mlp_ratio must be positive".into()));
        }
        self.block_shape().validate()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_hidden: self.mlp_ratio * self.width,
        }
    }

    /// Every tensor the archive must hold, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut out = vec![("patch_embed.weight".to_string(), vec![self.patch_dim(), d])];
        if self.patch_bias {
            out.push(("patch_embed.bias".into(), vec![d]));
        }
        out.push(("cls_token".into(), vec![d]));
        out.push(("pos_embed".into(), vec![self.num_patches() + 1, d]));
        if self.ln_pre {
            out.push(("ln_pre.weight".into(), vec![d]));
            out.push(("ln_pre.bias".into(), vec![d]));
        }
        for i in 0..self.depth {
            for (n, s) in self.block_shape().tensor_shapes() {
                out.push((format!("blocks.{i}.{n}"), s));
            }
        }
        out
    }

    /// Closed form: `3p²D [+D] + D + (N+1)D [+2D] + depth·(4D² + 2DH + 9D + H)`.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let mut n = self.patch_dim() * d + d + (self.num_patches() + 1) * d;
        if self.patch_bias {
            n += d;
        }
        if self.ln_pre {
            n += 2 * d;
        }
        n + self.depth * self.block_shape().param_count()
    }
}

/// Matrix of per-layer CLS tokens, `depth × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures(Tensor<f32>);

impl LayerFeatures {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[0] < 2 {
            return Err(LtdError::Dimension(format!(
                "layer features need a [layers, D] matrix with ≥2 layers, got {:?}",
                t.shape()
            )));
        }
        t.check_finite("layer features")?;
        Ok(LayerFeatures(t))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f32] {
        self.0.row(k)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Immutable backbone weights. The content hash is fixed at construction.
#[derive(Clone, Debug)]
pub struct BackboneWeights {
    config: BackboneConfig,
    norm: NormConstants,
    patch_w: Tensor<f32>,
    patch_b: Option<Tensor<f32>>,
    cls: Tensor<f32>,
    pos: Tensor<f32>,
    ln_pre: Option<(Tensor<f32>, Tensor<f32>)>,
    blocks: Vec<BlockParams<f32>>,
    hash: String,
}

impl BackboneWeights {
    /// Seeded random initialization: truncated normal (std 0.02) projections
    /// and embeddings, zero biases, unit layer norms.
    pub fn init_random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::BACKBONE_INIT]);
        let d = config.width;
        let patch_w = Tensor::trunc_normal(&[config.patch_dim(), d], INIT_STD, &mut rng);
        let patch_b = config.patch_bias.then(|| Tensor::zeros(&[d]));
        let cls = Tensor::trunc_normal(&[d], INIT_STD, &mut rng);
        let pos = Tensor::trunc_normal(&[config.num_patches() + 1, d], INIT_STD, &mut rng);
        let ln_pre = config.ln_pre.then(|| (Tensor::ones(&[d]), Tensor::zeros(&[d])));
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(config.block_shape(), INIT_STD, &mut rng))
            .collect();
        Ok(Self::assemble(
            config,
            NormConstants::default(),
            patch_w,
            patch_b,
            cls,
            pos,
            ln_pre,
            blocks,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: BackboneConfig,
        norm: NormConstants,
        patch_w: Tensor<f32>,
        patch_b: Option<Tensor<f32>>,
        cls: Tensor<f32>,
        pos: Tensor<f32>,
        ln_pre: Option<(Tensor<f32>, Tensor<f32>)>,
        blocks: Vec<BlockParams<f32>>,
    ) -> Self {
        let mut w = BackboneWeights {
            config,
            norm,
            patch_w,
            patch_b,
            cls,
            pos,
            ln_pre,
            blocks,
            hash: String::new(),
        };
        w.hash = w.compute_hash();
        w
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn norm(&self) -> &NormConstants {
        &self.norm
    }

    /// Backbone weights never take part in training.
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn compute_hash(&self) -> String {
        let named = self.named();
        content_hash(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Recomputes the hash and compares it with the one recorded at load.
    pub fn verify_hash(&self) -> Result<()> {
        if self.compute_hash() != self.hash {
            return Err(LtdError::Contract("backbone weights changed after load".into()));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = vec![("patch_embed.weight".to_string(), &self.patch_w)];
        if let Some(b) = &self.patch_b {
            out.push(("patch_embed.bias".into(), b));
        }
        out.push(("cls_token".into(), &self.cls));
        out.push(("pos_embed".into(), &self.pos));
        if let Some((g, b)) = &self.ln_pre {
            out.push(("ln_pre.weight".into(), g));
            out.push(("ln_pre.bias".into(), b));
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            out.extend(blk.named(&format!("blocks.{i}.")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn shape_audit(&self) -> Result<()> {
        let expected = self.config.tensor_shapes();
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(LtdError::Dimension(format!(
                "{} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(ArchiveError::ShapeMismatch {
                    name: en.clone(),
                    expected: es.clone(),
                    found: at.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[BlockParams<f32>] {
        &self.blocks
    }

    pub fn patch_weight(&self) -> &Tensor<f32> {
        &self.patch_w
    }

    pub fn patch_bias(&self) -> Option<&Tensor<f32>> {
        self.patch_b.as_ref()
    }

    pub fn cls_token(&self) -> &Tensor<f32> {
        &self.cls
    }

    pub fn pos_embed(&self) -> &Tensor<f32> {
        &self.pos
    }

    pub fn ln_pre(&self) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        self.ln_pre.as_ref().map(|(g, b)| (g, b))
    }

    /// Returns a copy whose attention and MLP output projections are zero, so
    /// every layer passes its input through unchanged.
    pub fn with_zeroed_residuals(&self) -> Self {
        let mut blocks = self.blocks.clone();
        blocks.iter_mut().for_each(BlockParams::zero_residual_branches);
        Self::assemble(
            self.config.clone(),
            self.norm.clone(),
            self.patch_w.clone(),
            self.patch_b.clone(),
            self.cls.clone(),
            self.pos.clone(),
            self.ln_pre.clone(),
            blocks,
        )
    }

    pub fn with_norm(&self, norm: NormConstants) -> Self {
        let mut w = self.clone();
        w.norm = norm;
        w
    }

    /// Normalized patch matrix, `[num_patches, 3·p·p]`.
    pub fn patchify(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        let cfg = &self.config;
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(LtdError::Dimension(format!(
                "image is {}x{}, backbone expects {}x{}",
                image.height(),
                image.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        let p = cfg.patch_size;
        let g = cfg.grid();
        let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        let px = image.pixel(gy * p + dy, gx * p + dx);
                        for ((v, m), sd) in px.iter().zip(&self.norm.mean).zip(&self.norm.std) {
                            out.push((v - m) / sd);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// CLS token after every layer. Pure in (image, weights); records no gradients.
    pub fn encode_layers(&self, image: &ImageTensor) -> Result<LayerFeatures> {
        let cfg = &self.config;
        let d = cfg.width;
        let np = cfg.num_patches();
        let n = np + 1;
        let patches = self.patchify(image)?;
        let bias = self
            .patch_b
            .as_ref()
            .map(|b| b.data().to_vec())
            .unwrap_or_else(|| vec![0.0; d]);
        let emb = crate::block::linear(&patches, np, cfg.patch_dim(), d, self.patch_w.data(), &bias);

        let mut tokens = Vec::with_capacity(n * d);
        tokens.extend_from_slice(self.cls.data());
        tokens.extend_from_slice(&emb);
        for (t, p) in tokens.iter_mut().zip(self.pos.data()) {
            *t += p;
        }
        if let Some((g, b)) = &self.ln_pre {
            tokens = layer_norm_rows(&tokens, n, d, g.data(), b.data());
        }
        let mut rows = Vec::with_capacity(cfg.depth * d);
        for blk in &self.blocks {
            blk.forward_inplace(&mut tokens, n, cfg.activation);
            rows.extend_from_slice(&tokens[..d]);
        }
        LayerFeatures::new(Tensor::new(vec![cfg.depth, d], rows)?)
    }

    pub fn to_archive(&self) -> Archive {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let mut a = Archive::new(config, Some(self.norm.clone()));
        for (name, t) in self.named() {
            a.insert(name, t);
        }
        a
    }

    pub fn from_archive(mut archive: Archive) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_value(archive.config.clone())
            .map_err(|e| ArchiveError::Header(format!("backbone config: {e}")))?;
        config.validate()?;
        let norm = archive.norm.clone().unwrap_or_default();
        if norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(LtdError::Config(format!("normalization std {:?}", norm.std)));
        }
        let d = config.width;
        let patch_w = archive.take("patch_embed.weight", &[config.patch_dim(), d])?;
        let patch_b = if config.patch_bias {
            Some(archive.take("patch_embed.bias", &[d])?)
        } else {
            None
        };
        let cls = archive.take("cls_token", &[d])?;
        let pos = archive.take("pos_embed", &[config.num_patches() + 1, d])?;
        let ln_pre = if config.ln_pre {
            Some((archive.take("ln_pre.weight", &[d])?, archive.take("ln_pre.bias", &[d])?))
        } else {
            None
        };
        let blocks = (0..config.depth)
            .map(|i| BlockParams::from_archive(config.block_shape(), &mut archive, &format!("blocks.{i}.")))
            .collect::<Result<Vec<_>>>()?;
        archive.expect_consumed("")?;
        let w = Self::assemble(config, norm, patch_w, patch_b, cls, pos, ln_pre, blocks);
        w.shape_audit()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    pub fn config_json(&self) -> Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

/// Random image for tests and benchmarks.
pub fn random_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> ImageTensor {
    let data = (0..size * size * 3).map(|_| rng.gen::<f32>()).collect();
    ImageTensor::new(size, size, data).expect("valid size")
}
