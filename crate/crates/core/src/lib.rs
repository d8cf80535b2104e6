//! Single-image test-time adaptation for batch-norm CNNs.
//!
//! A trained classifier is adapted to one test image at prediction time by
//! re-estimating its batch-norm statistics from the image and a few
//! label-preserving augmentations, blended with the stored source statistics.
//! The blend prior can be fixed or chosen per image by output entropy.

pub mod adapt;
pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod normalization;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, FormatError, Result};
pub use tensor::Tensor;
