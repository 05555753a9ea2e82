//! Anatomy-aware low-dose CT denoising.
//!
//! A U-shaped generator is trained against a patch discriminator that is
//! conditioned on frozen vision-transformer features of the normal-dose
//! reference, together with a contrastive loss over the same features. The
//! crate also provides synthetic phantoms, an image-domain dose simulator
//! and image-quality metrics so the whole pipeline runs without external
//! data.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
