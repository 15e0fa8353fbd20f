//! Polyp segmentation with a contrastive auxiliary branch.
//!
//! The crate is organized bottom-up:
//!
//! - [`netcore`]: reverse-mode graph, layers, Adam, cosine schedule,
//!   gradient checking, checkpoints.
//! - [`data`]: paired image/mask loading and split manifests.
//! - [`taxonomy`]: count x size mask categories and negative sampling.
//! - [`augment`]: seeded joint and image-only augmentation.
//! - [`model`]: encoder, momentum encoder, projection head, MASPP, CA decoder.
//! - [`objectives`]: triplet, Dice, BCE and hybrid losses; evaluation metrics.
//! - [`trainer`]: batch assembly, training step, evaluation, run loop, config.

pub mod augment;
pub mod data;
pub mod error;
pub mod model;
pub mod netcore;
pub mod objectives;
pub mod seed;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ndarray;
pub use tensor::{DType, Element, Tensor};
