//! Multi-view synthetic data, a patch-wise convolutional network trained by
//! gradient descent, and feature-permutation data augmentation, together
//! with the diagnostics, linear baselines and experiment harness used to
//! study when rare features are learned and when samples are memorized.

pub mod augmentation;
pub mod baselines;
pub mod diagnostics;
pub mod distribution;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod stats;

pub use augmentation::{apply, augment_dataset, build_permutation, FeaturePermutation};
pub use diagnostics::{GinitReport, ProbeFrame};
pub use distribution::{Dataset, DistParams, Sample, SamplingMode};
pub use error::{Error, Result};
pub use network::{Model, TrainConfig, TrainResult};
