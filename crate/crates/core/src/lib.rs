//! Low-light light-field restoration.
//!
//! * [`lf`]: light-field container, view stacking, neighbour rings, EPIs.
//! * [`model`]: the two-stage restoration network and histogram amplifier.
//! * [`loss`] and [`metrics`]: training objective, PSNR and SSIM.
//! * [`pseudolf`]: single-image ↔ pseudo light-field codec.
//! * [`synth`]: synthetic low-light data and augmentation.
//! * [`align`]: rigid misalignment estimation between captures.
//! * [`train`]: the training loop and run configuration.

pub mod align;
pub mod config;
pub mod error;
pub mod lf;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pseudolf;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
