//! N:M structured sparsity, spatial-sparsity profiling and spatial
//! re-parameterization (SpRe) for small convolutional networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod reparam;
pub mod scalar;
pub mod sparsity;
pub mod spre;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use error::{Error, Result};
pub use nn::{BatchNormParams, ConvSpec, Mode};
pub use reparam::{fuse_bn, merge_branches, verify_equivalence, EquivalenceReport, MergedConv, TrialInput};
pub use scalar::{DType, Scalar};
pub use sparsity::{
    check_nm, magnitude_mask, nm_project, spatial_sparsity, uniform_spatial_mask, NMPattern, SparsityProfile,
};
pub use spre::{
    build_spre_mask, build_variant_mask, refresh_masks, spre_backward_ste, spre_forward, BlockOptions,
    ReferenceMode, SpReBlock, SpReGrads, SpReVariant,
};
pub use trainer::{evaluate, run_uniform_ablation, synth_dataset, train, RunMetrics, TinyCnn, TrainConfig};
pub use tensor::{apply_mask, count_nonzero_mask, subset_of, FeatureMap, Mask4, Matrix, Shape4, Tensor4};

pub type Tensor4F32 = Tensor4<f32>;
pub type Tensor4F64 = Tensor4<f64>;
pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type SpReBlockF32 = SpReBlock<f32>;
pub type SpReBlockF64 = SpReBlock<f64>;
pub type MergedConvF32 = MergedConv<f32>;
pub type MergedConvF64 = MergedConv<f64>;
pub type TinyCnnF32 = TinyCnn<f32>;
pub type TinyCnnF64 = TinyCnn<f64>;
