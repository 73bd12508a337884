//! Shared building blocks for weakly-supervised patch-grid classification.
//!
//! Whole survey frames carry a single class label. They are cut into a grid
//! of patches, each patch inherits the frame label, and a classifier is
//! trained on the patches. This crate holds everything that does not depend
//! on the network itself:
//!
//! * [`tensor`]: dense row-major arrays and the GEMM kernel used by layers
//! * [`raster`]: 8-bit RGB frames and bilinear resampling
//! * [`taxonomy`] and [`manifest`]: the class vocabulary and dataset records
//! * [`ingest`]: manifest construction, geographic holdout and k-fold splits
//! * [`tiler`]: grid tiling with weak label propagation
//! * [`rng`] and [`augment`]: seeded, splittable randomness and the five
//!   augmentation policies

pub mod augment;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod raster;
pub mod rng;
pub mod taxonomy;
pub mod tensor;
pub mod tiler;

pub use augment::{AugmentKind, AugmentParams, AugmentPolicy};
pub use error::{Error, Result};
pub use manifest::{Density, Manifest, SampleRecord, Split};
pub use raster::{resize_bilinear, ImageBuffer};
pub use rng::Rng;
pub use taxonomy::{Taxonomy, TaxonomyMode};
pub use tensor::{Scalar, Tensor};
pub use tiler::{GridSpec, LabeledPatch, PatchDataset};
