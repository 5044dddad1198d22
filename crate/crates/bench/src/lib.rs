//! Shared fixtures for the benchmarks.

use ltd_core::data::synth::render;
use ltd_core::pipeline::eval_features;
use ltd_core::rng::rng_for;
use ltd_core::{BackboneConfig, BackboneWeights, HeadConfig, ImageTensor, LayerFeatures, LtdHeadParams};

pub struct Toy {
    pub backbone: BackboneWeights,
    pub head: LtdHeadParams<f32>,
    pub images: Vec<ImageTensor>,
    pub features: Vec<LayerFeatures>,
}

/// Random toy backbone, default head and `n` synthetic images with features.
pub fn toy(n: usize) -> Toy {
    let backbone = BackboneWeights::init_random(BackboneConfig::toy(), 0).expect("toy backbone");
    let cfg = HeadConfig::default_for(8, 32);
    let head = LtdHeadParams::init(&cfg, &mut rng_for(0, &[1]));
    let images: Vec<ImageTensor> = (0..n)
        .map(|i| render(1, (i % 2) as u8, i, 64).expect("render").0)
        .collect();
    let features = images
        .iter()
        .map(|im| eval_features(&backbone, im, &[]).expect("features"))
        .collect();
    Toy {
        backbone,
        head,
        images,
        features,
    }
}
