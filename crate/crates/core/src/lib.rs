//! Universal adversarial perturbations for image classifiers.
//!
//! An encoder-decoder generator turns a frozen noise tensor into one
//! ∞-norm-bounded perturbation trained against a frozen classifier
//! ([`trainer`]). Gradient-weighted activation maps over the training set
//! ([`saliency`]) then steer an elementwise rescaling of that perturbation
//! ([`refine`]), and [`eval`] measures attack success rate, perturbation
//! magnitude, transfer across models, and how predictions concentrate.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*32` and
//! `*64` aliases below name the common instantiations.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod registry;
pub mod saliency;
pub mod scalar;
pub mod trainer;
pub mod uapf;

pub use classifier::{ClassifierAdapter, LossSpec, NetworkClassifier, Probabilities};
pub use config::RunConfig;
pub use data::{
    apply_perturbation, perturbation_l2, project_to_ball, ImageBatch, ImageShape, LabeledDataset,
    Perturbation, PixelRange, Split, Stage,
};
pub use error::{Result, UapError};
pub use generator::{build_generator, sample_noise, GeneratorConfig, GeneratorModel};
pub use pipeline::{run_pipeline, PipelineError, PipelineReport, RunOptions};
pub use refine::{choose_threshold, refine, RefineConfig};
pub use scalar::Scalar;
pub use trainer::{cross_entropy, train_uap, TrainConfig, TrainLog};

pub type ImageBatch32 = ImageBatch<f32>;
pub type ImageBatch64 = ImageBatch<f64>;
pub type Perturbation32 = Perturbation<f32>;
pub type Perturbation64 = Perturbation<f64>;
pub type Dataset32 = LabeledDataset<f32>;
pub type Dataset64 = LabeledDataset<f64>;
pub type Generator32 = GeneratorModel<f32>;
pub type Generator64 = GeneratorModel<f64>;
pub type Classifier32 = NetworkClassifier<f32>;
pub type Classifier64 = NetworkClassifier<f64>;
pub type AttentionImage32 = saliency::WeightedAttentionImage<f32>;
pub type AttentionImage64 = saliency::WeightedAttentionImage<f64>;
