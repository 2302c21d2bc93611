//! Transformation-based one-class anomaly detection for small multi-channel
//! image stamps.
//!
//! A classifier learns to tell which catalog transformation was applied to an
//! inlier stamp; Dirichlet fits of its softmax outputs give a normality score
//! that drops for stamps unlike the training inliers.

pub mod classifier;
pub mod dirichlet;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod scalar;
pub mod selection;
pub mod stamps;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Stamp32 = stamps::Stamp<f32>;
pub type Stamp64 = stamps::Stamp<f64>;
pub type Dataset32 = stamps::StampDataset<f32>;
pub type Model32 = classifier::ClassifierModel<f32>;
pub type Model64 = classifier::ClassifierModel<f64>;
