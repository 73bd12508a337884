//! Convolutional classifier built from a fixed layer vocabulary with exact
//! gradients, plus the Adam optimizer, the plateau learning-rate schedule,
//! a k-nearest-neighbour head and a checksummed checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod knn;
pub mod layers;
pub mod loss;
pub mod network;
pub mod scheduler;
pub mod spec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use knn::knn_predict;
pub use loss::{cross_entropy, softmax_cross_entropy_grad};
pub use network::{ForwardCache, Gradients, Mode, Network};
pub use scheduler::{PlateauScheduler, ScheduleAction};
pub use spec::{Backbone, Head, LayerSpec, ModelSpec};

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
