//! Disruptive autoencoder pre-training for 3D volumes at desk scale.
//!
//! Volumes are disrupted (noise, down/up resampling, channel masking of
//! tokens), reconstructed by a small transformer autoencoder, and pulled
//! together or apart by modality through a contrastive term on pooled
//! latents. Fine-tuning swaps the decoder for a per-voxel segmentation head.

pub mod analysis;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod disruption;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod volume;

pub use error::{DaeError, Result};
