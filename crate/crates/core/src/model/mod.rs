//! Toy DMST classifier and everything needed to train it.
//!
//! Tensors here are row-major with one token per row. The forward pass is
//! recorded on a [`Tape`] so every parameter gets an exact reverse-mode
//! gradient, including through the top-k soft-threshold gate.

mod checkpoint;
mod config;
mod data;
mod net;
mod optim;
pub mod rng;
mod tape;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, TensorEntry, MAGIC};
pub use config::{ModelConfig, RunConfig, SyntheticDatasetSpec, TrainConfig};
pub use data::{
    generate_synthetic, load_image_dir, nearest_subspace, nearest_subspace_accuracy, patchify, subspace_tokens,
    Dataset, Sample,
};
pub use net::{param_specs, Init, LayerTrace, Model, ParamSpec, SampleGrad, SampleGradBatch, INIT_STD, TSSA_ETA};
pub use optim::{adamw_step, OptimState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate, metrics_csv, train, train_with, EpochMetrics, Split, TrainOutcome};
