//! Temporal forgery localization from cross-modal reconstruction discrepancies.
//!
//! Paired visual/audio speech-feature sequences are reconstructed from one
//! another by small 1D conv encoder/decoder networks; the residuals feed a
//! convolutional feature pyramid whose heads score every frame and regress
//! the boundaries of the manipulated segment it belongs to. Decoded segments
//! are suppressed with Gaussian SoftNMS and aggregated into video scores.
//!
//! Module map:
//!
//! - [`network`]: model configuration, parameters, forward pass, checkpoints
//! - [`objectives`]: focal, DIoU, smooth-L1, reconstruction and detection losses
//! - [`postprocess`]: segment decoding, SoftNMS, video-level score
//! - [`evaluation`]: AP@IoU, AR@K, ROC-AUC, binary AP
//! - [`wildscore`]: valid-segment construction, chunking, Ψ_m and Ψ_s
//! - [`datagen`]: synthetic correlated-latent feature generator and file formats
//! - [`trainer`]: Adam, plateau schedule, early stopping, grid sweeps

pub mod datagen;
pub mod evaluation;
pub mod interval;
pub mod network;
pub mod objectives;
pub mod postprocess;
pub mod trainer;
pub mod wildscore;

mod binio;
mod error;

pub use error::{Error, Result};
pub use interval::{Interval, SegmentPrediction};
