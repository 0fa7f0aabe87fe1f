//! Unpaired video retargeting with spatiotemporal cycle consistency.
//!
//! The crate is layered bottom-up: [`tensor`] (reverse-mode autodiff),
//! [`nn`] (generator, PatchGAN discriminator, U-Net predictor/segmenter),
//! [`losses`] (adversarial, cycle, recurrent and recycle objectives),
//! [`data`] (synthetic two-domain streams and frame I/O), [`train`]
//! (alternating optimisation and checkpoints), [`eval`] (inference and
//! metrics), [`verify`] (64-bit self-checks) and [`cli`].

pub mod tensor;
pub mod error;
pub mod nn;
pub mod losses;
pub mod data;
pub mod train;
pub mod eval;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
