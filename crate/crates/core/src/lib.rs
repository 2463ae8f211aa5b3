//! Recurrent multi-to-single-frame video inpainting.
//!
//! The crate covers the whole experiment: frame/mask/flow I/O ([`media`]),
//! differentiable warping ([`warp`]), a classical flow estimator and
//! synthetic sequences with exact flow ([`flow_oracle`]), hole generators
//! ([`maskgen`]), the network ([`model`]), training objectives ([`losses`]),
//! datasets ([`dataset`]), training and inference ([`pipeline`]), metrics
//! ([`eval`]) and comparison rendering ([`compare`]).

pub mod compare;
mod conv;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow_oracle;
pub mod losses;
pub mod maskgen;
pub mod media;
pub mod model;
pub mod pipeline;
pub mod warp;

pub use dataset::{ClipData, Dataset};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use maskgen::{MaskKind, MaskSpec};
pub use media::{Clip, FlowField, Frame, Mask, MaskSeq};
pub use model::{ModelConfig, StepMode, Vinet};
pub use pipeline::{InferMode, TrainConfig};
