//! Interpretable three-way toxicity classification.
//!
//! The crate trains small transformer encoders that sort text into
//! explicit hate, implicit hate and non-hate, and explains each prediction
//! with Integrated Gradients token attributions computed through its own
//! reverse-mode differentiation engine.
//!
//! Modules, bottom up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and the recorded
//!   primitive-op graph with value and adjoint rules.
//! * [`text`]: normalization, label harmonization, tokenization, vocabulary,
//!   encoding and 33:33:33 splitting.
//! * [`model`] and [`checkpoint`]: the encoder classifier and its binary
//!   checkpoint format.
//! * [`train`] and [`metrics`]: Adam training, grid search, and
//!   accuracy / macro precision / recall / F1.
//! * [`attribution`]: Integrated Gradients, normalization to [-1, 1] and
//!   token ranking.
//! * [`synthetic`]: a templated corpus for end-to-end runs.

pub mod attribution;
pub mod autodiff;
pub mod checkpoint;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;

pub use attribution::{
    completeness_gap, explain, integrated_gradients, normalize_attributions, rank_tokens,
    AttributionError, AttributionResult, RankedToken,
};
pub use autodiff::{
    evaluate_with_gradient, finite_difference_check, GradCheckReport, Graph, GraphError,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use metrics::{compute_metrics, MetricsReport, ReportRow};
pub use model::{init_model, Classifier, ModelConfig, ModelError, ModelParams, Prediction};
pub use tensor::Tensor;
pub use text::{Corpus, Label, SplitSpec, Vocabulary};
pub use train::{evaluate, grid_search, train, GridSpec, Hyperparams, TrainError, TrainHistory};
