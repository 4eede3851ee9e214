//! Video-language modeling at desk scale.
//!
//! A divided space-time video transformer whose temporal attention output is
//! gated per layer and frame by `α = tanh(γ) + 1`, a BERT-style text encoder
//! shared with a video-grounded variant that cross-attends to pooled video
//! features, non-parametric text-dependent pooling, and the contrastive,
//! matching and answer-classification objectives. Everything runs on a small
//! reverse-mode differentiation core ([`autodiff`]) so every gradient can be
//! checked against finite differences.
//!
//! The [`data`], [`train`], [`eval`] and [`checkpoint`] modules provide the
//! synthetic corpus, training loops, retrieval metrics and persistence;
//! [`introspect`] exports scalings, pooling weights and Grad-CAM maps.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod introspect;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod tensor;
pub mod text;
pub mod train;
pub mod video;

pub use autodiff::{Gradients, Graph, Var};
pub use config::{ModelConfig, PoolingMode, RunConfig, TemporalOutInit, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use tensor::{Float, Tensor};
pub use text::{Mode, TokenSequence, Vocabulary};
pub use video::{TemporalPath, VideoTensor};
