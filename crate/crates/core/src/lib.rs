//! Multi-layer residual sparsifying transforms.
//!
//! Each layer applies a learned unitary transform to wrap-around patches of
//! its input, keeps the large coefficients by hard thresholding and passes
//! the thresholding residual maps (minus the lowest-energy ones) on to the
//! next layer. Training is greedy, one layer at a time, alternating closed
//! form code and transform updates. A matching decoder inverts the chain,
//! which together gives an adaptive image denoiser.
//!
//! Everything numeric is generic over [`Real`] (`f32` / `f64`); the aliases
//! at the crate root pin the double-precision types the tools use.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoise;
pub mod error;
pub mod io;
pub mod learn;
pub mod model;
pub mod patch;
pub mod scalar;
pub mod svd;
pub mod transform;

pub use denoise::{
    add_gaussian_noise, denoise_multipass, denoise_single_pass, psnr, simulate_and_denoise, DenoiseConfig,
    DenoiseReport,
};
pub use error::{Error, Result};
pub use learn::{atom_montage, train_layer, train_model, InitPolicy, TrainReport};
pub use model::{
    decode, downsample_residuals, encode, forward_layer, DeepRestModel, EncodedImage, LayerConfig, TransformLayer,
};
pub use patch::{aggregate_patches, extract_patches, Image, PatchMatrix, PatchSpec, Volume};
pub use scalar::Real;
pub use transform::{
    dct2_init, hard_threshold, layer_cost, procrustes_update, sparse_code_layer, CoefficientMaps, Unitary,
};

pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
pub type Volume64 = Volume<f64>;
pub type Unitary64 = Unitary<f64>;
pub type Model64 = DeepRestModel<f64>;
pub type Model32 = DeepRestModel<f32>;
pub type Encoded64 = EncodedImage<f64>;
