//! Unsupervised multi-task feature learning on point clouds.
//!
//! A multi-scale EdgeConv encoder is trained jointly by K-means clustering of
//! its shape features, self-supervised classification of the resulting
//! cluster ids, and denoising Chamfer reconstruction. The crate also ships the
//! evaluation protocols used to measure the learned features.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
