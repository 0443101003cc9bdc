//! Clip-level micro-expression recognition built around motion pairing and an
//! adaptive temporal-motion graph convolution network.
//!
//! The pipeline pairs every frame of a clip with the onset frame, encodes the
//! frame differences with a small attention encoder, arranges the per-pair
//! motion features as nodes of a windowed temporal graph (one global node at
//! the apex pair), runs graph convolution layers whose adjacency is adapted
//! per layer, and classifies the aggregated node features. Training uses
//! focal loss with AdamW and an exponential learning-rate schedule;
//! evaluation follows the leave-one-subject-out protocol with UF1/UAR/ACC.
//!
//! Everything runs on a small double-precision tensor kernel with
//! reverse-mode automatic differentiation ([`tape`]) so gradients are
//! checkable against finite differences end to end ([`gradcheck`]).

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod optim;
pub mod pgm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
