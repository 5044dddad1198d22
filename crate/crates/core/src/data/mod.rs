//! Manifests, image IO, preprocessing, degradations and the toy dataset generator.

pub mod image;
pub mod manifest;
pub mod synth;
pub mod transform;

pub use self::image::{psnr, ImageTensor};
pub use manifest::{DatasetManifest, Record, FAKE, REAL};
pub use synth::{gen_synthetic_dataset, mean_abs_laplacian};
pub use transform::{
    apply_degradations, degrade_blur, degrade_downsample, degrade_jpeg, gaussian_kernel, preprocess, resize_bilinear,
    DegradeSpec, PreprocessTarget,
};
