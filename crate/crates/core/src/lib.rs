//! Pose-guided token selection for video transformers.
//!
//! A small reverse-mode autodiff engine drives a ViT encoder over space-time
//! cubes plus learnable pose tokens. Selection stages prune visual tokens by
//! their attention to the class and pose tokens and merge part of the pruned
//! ones back. The crate also carries an analytic FLOP model, a synthetic
//! dataset and the training and evaluation loops.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod heads;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod par;
pub mod ptnsr;
pub mod selection;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod videotok;

pub use autodiff::{Graph, Var};
pub use config::{OptimConfig, RunConfig};
pub use error::{Error, Result};
pub use model::{ModelConfig, Params, Scale};
pub use par::Execution;
pub use selection::{MergePolicy, ScorePolicy, SelectionConfig, SimilarityFeature};
pub use tensor::{Scalar, Tensor};
