//! Dual-stream patch + context network: architecture, backprop training,
//! embedding extraction and finite-difference gradient checking.

mod arch;
mod features;
mod gradcheck;
mod holistic;
mod network;
mod train;

pub use arch::{ConvLayout, ConvSpec, DenseLayout, Layout, NetArch};
pub use features::{extract_embeddings, EmbedInputs, FeatureMatrix};
pub use gradcheck::{compare_with_finite_differences, gradient_check};
pub use holistic::{center, image_inputs, normalize_patch, sample_target, train_initial_holistic, HolisticConfig};
pub use network::{EmbedNetwork, Forward, Target};
pub use train::{mean_loss, train, Example, LossKind, TrainConfig, TrainHistory, TrainingSet};

/// Convenience alias: the pipeline extracts patch embeddings keyed by patch id.
pub type PatchFeatures = FeatureMatrix<crate::datamodel::PatchId>;
