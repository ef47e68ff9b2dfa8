//! Fallen-object detection for fixed road-surface cameras.
//!
//! A frame is cropped to the road, resized onto a grid of 64×64 unit
//! patches, and the road cells are reconstructed by a variational
//! auto-encoder trained on clean surface. Per-patch reconstruction-error
//! summaries feed an isolation forest whose scores are thresholded by an
//! assumed contamination fraction.
//!
//! The modules mirror that flow:
//!
//! - [`imagegrid`]: PGM I/O, crop, bilinear resize, patch grid, road mask
//! - [`vae`]: fully connected VAE with hand-written backprop and Adam
//! - [`anomaly`]: error maps, feature vectors, binary anomaly masks
//! - [`iforest`]: isolation forest and fraction thresholding
//! - [`metrics`]: SSIM, Dice, confusion matrix, score histograms
//! - [`synthgen`]: procedural road frames with injected objects
//! - [`persist`]: `.fsva` model and `.fsif` forest file formats
//! - [`cli`]: the `fallscope` pipeline commands

// Range checks are written `!(x > lo)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod cli;
pub mod error;
pub mod iforest;
pub mod imagegrid;
mod linalg;
pub mod metrics;
pub mod persist;
pub mod seed;
pub mod synthgen;
pub mod vae;

pub use error::{Error, Result};
