//! Training, evaluation, cross validation, feature embedding, whole-frame
//! inference and synthetic survey data on top of `patchgrid-core` and
//! `patchgrid-nn`.

pub mod data;
pub mod embed;
pub mod error;
pub mod infer;
pub mod synth;
pub mod traineval;

pub use data::{prepare_patch, PatchSet};
pub use error::{PipelineError, Result};
pub use traineval::{
    argmax, cross_validate, cross_validate_with, evaluate, fit, fit_network, load_model, metrics, run_evaluation,
    train, train_validation_split, Classifier, ConfusionMatrix, CvReport, Evaluation, History, LoadedModel,
    MetricsReport, NetworkModel, StopReason, TrainConfig, TrainOutcome, Trainable,
};
