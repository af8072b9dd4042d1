//! Compact bilinear pooling classification head.
//!
//! Two precomputed CNN feature grids are fused per location with a Tensor
//! Sketch (FFT circular convolution of two Count Sketches), refined by a
//! residual group of 3x3 convolutions, average pooled and l2-normalized. Each
//! input grid is also pooled by a softmax spatial attention branch, and a
//! fully-connected layer over the concatenation produces class logits.
//! Training is plain SGD with weight decay and a single step learning-rate
//! drop; every backward pass is written by hand and checked against finite
//! differences (see [`checks`]).

pub mod checks;
pub mod data;
pub mod error;
mod fsutil;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sketch;
pub mod train;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use layers::FeatureMap;
pub use model::{ModelConfig, ModelParams};
pub use sketch::SketchParams;
pub use train::TrainConfig;
