//! Latent-space attribute axis toolkit.
//!
//! The crate fits per-attribute directions in a latent space by least
//! squares, decouples them by Gram-Schmidt orthonormalization, and extends
//! new attribute directions against an existing base without refitting the
//! base. A synthetic ground-truth world (`toyworld`) with known directions,
//! a linear template decoder, and a noiseless labeler serves as the oracle
//! for everything: edit leakage, flip accuracy, reconstruction quality.
//!
//! Supporting machinery: image-quality metrics (PSNR / SSIM / MS-SSIM), a
//! composite reconstruction loss (pixel + multi-layer feature distance)
//! with analytic gradients, and an Adam trainer for a toy linear encoder.
//!
//! Deterministic by construction: every sampling operation takes an
//! explicit seed, and the CLI fans a master seed out to per-stage seeds.

pub mod axes;
pub mod editing;
pub mod image;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod toyworld;
pub mod trainer;

pub use axes::{AttributeAxis, AxisBank, AxisSource, ExtensionMode, LatentDataset};
pub use image::ImageGrid;
pub use linalg::{Matrix, Vector};
pub use toyworld::ToyWorldSpec;
