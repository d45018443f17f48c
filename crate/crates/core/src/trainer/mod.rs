//! Experiment driver: model assembly, datasets and training loops.

pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use config::{DatasetConfig, LrSchedule, MaskKind, Method, TinyCnnConfig, TrainConfig};
pub use data::{cifar10_load, cifar10_load_with, synth_dataset, synth_dataset_with_noise, Dataset, Split};
pub use model::{LayerPlan, MaskRule, MaskedConvBn, SparseLayer, TinyCnn};
pub use train::{
    accuracy, check_layer, evaluate, layer_profiles, load_dataset, predictions, run_uniform_ablation,
    run_uniform_ablation_on, sparsify_pretrained, train, train_on, write_outputs, MaskCheck, ProfileSnapshot,
    RunMetrics,
};
