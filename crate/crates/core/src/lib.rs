//! Decoupled style/category adapters over a frozen vision-language backbone,
//! their adversarial and triplet training objectives, and a toy 2-D
//! diffusion model guided through K/V-split cross-attention.
//!
//! Everything runs in 64-bit floats on the CPU and is deterministic given a
//! seed.

pub mod backbone;
pub mod datagen;
pub mod decompose;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
