//! Multiple instance learning with context-aware cluster routing.
//!
//! Bags of instance features are routed to learnable semantic anchors by
//! cosine similarity with a straight-through hard assignment. Each layer
//! refines instances with their anchor's aggregated context and then halves
//! the anchor set with an anchor-axis MLP. The crate carries its own small
//! reverse-mode autodiff, K-means anchor initialisation, survival and
//! subtyping losses and metrics, a synthetic bag generator, and the
//! cross-validated training harness.

pub mod autodiff;
pub mod bag;
pub mod bagfile;
pub mod error;
pub mod folds;
pub mod harness;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use bag::{FeatureBag, Label, SubtypeLabel, SurvivalLabel, Task};
pub use error::{MicoError, Result};
pub use model::{MicoConfig, MicoModel};
pub use params::ParamSet;
pub use tensor::Tensor;
