//! Multimodal fundus-image and demographic classification.
//!
//! The crate covers the whole experimental pipeline: cohort handling and
//! image preprocessing ([`cohort`]), the three neural paths ([`paths`]),
//! the fusion systems and tabular heads ([`fusion`]), training with cosine
//! scheduled AdamW ([`training`]), bootstrap evaluation ([`evaluation`]) and
//! Grad-CAM saliency ([`explain`]).

pub mod cohort;
pub mod error;
pub mod explain;
pub mod evaluation;
pub mod fusion;
pub mod nn;
pub mod paths;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
