//! Transparent glyph animation with an Alpha-as-RGB joint representation.
//!
//! The crate covers the whole desk-scale pipeline: procedural RGBA glyph
//! clips, joint RGB + alpha layouts, a small flow-matching transformer with a
//! tape-based reverse-mode engine, Euler sampling with classifier-free
//! guidance, and evaluation (Farnebäck optical flow, RGBA alignment score,
//! soft alpha mIoU).

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod glyph;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod rgba;
pub mod rng;

pub use error::{Error, Result};
