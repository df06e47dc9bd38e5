//! Variational continual test-time adaptation for small dense classifiers.
//!
//! The crate trains a deterministic source classifier on labeled data,
//! warm-starts a mean-field Gaussian posterior from it, and then adapts
//! online to a stream of unlabeled, corrupted batches. Adaptation follows a
//! mean-teacher scheme: a student posterior is updated against augmentation-
//! filtered teacher targets plus KL anchors to the frozen source posterior
//! and to the slowly moving teacher, with the anchor weight chosen per batch
//! from the entropy gap between source and teacher predictions. Predictions
//! are served from the matching mixture of source and teacher.
//!
//! Everything is f64, single-threaded, and driven by explicitly seeded
//! generators, so a given configuration reproduces exactly.

pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod selfcheck;
pub mod stream;
pub mod tensor;
pub mod varnet;
pub mod warmup;

pub use error::{CoreError, Result};
pub use rng::RngState;
pub use tensor::Tensor2;
