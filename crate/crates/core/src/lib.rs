//! Open-world discovery of error types in labeled feature data.
//!
//! The pipeline trains a two-tower encoder with cross-entropy plus a
//! margin-shifted soft nearest neighbor loss, draws contrastive counterparts
//! from label-based sample ranking, clusters the learned representations with
//! NNK-Means and scores the result with the usual open-world metrics.

pub mod numerics;
pub mod loss;
pub mod nnkmeans;
pub mod lbsr;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod pipeline;
