//! Image file to per-layer CLS features.

use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{BackboneWeights, LayerFeatures};
use crate::data::{apply_degradations, preprocess, DatasetManifest, DegradeSpec, ImageTensor, PreprocessTarget};
use crate::error::Result;

pub fn target_for(backbone: &BackboneWeights) -> PreprocessTarget {
    PreprocessTarget::for_input(backbone.config().image_size)
}

/// Degrade (if asked), preprocess (augmented when `augment` is given), encode.
pub fn image_features<R: Rng + ?Sized>(
    backbone: &BackboneWeights,
    image: &ImageTensor,
    degrade: &[DegradeSpec],
    augment: Option<&mut R>,
) -> Result<LayerFeatures> {
    let degraded;
    let img = if degrade.is_empty() {
        image
    } else {
        degraded = apply_degradations(image, degrade)?;
        &degraded
    };
    let x = preprocess(img, target_for(backbone), augment)?;
    backbone.encode_layers(&x)
}

/// Deterministic (center-crop) features for one image.
pub fn eval_features(
    backbone: &BackboneWeights,
    image: &ImageTensor,
    degrade: &[DegradeSpec],
) -> Result<LayerFeatures> {
    image_features::<rand_chacha::ChaCha8Rng>(backbone, image, degrade, None)
}

/// Eval-mode features for every record, in manifest order.
pub fn manifest_features(
    backbone: &BackboneWeights,
    manifest: &DatasetManifest,
    degrade: &[DegradeSpec],
) -> Result<Vec<LayerFeatures>> {
    manifest
        .records()
        .par_iter()
        .map(|r| {
            let img = ImageTensor::load(&manifest.resolve(r))?;
            eval_features(backbone, &img, degrade)
        })
        .collect()
}
