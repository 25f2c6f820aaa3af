//! Skip tuning for dual-encoder image-text models.
//!
//! Fine-tuning cost is driven by how many layers each feature/gradient flow
//! traverses and how many class texts each training image is matched
//! against. This crate shortens the first by caching shallow-layer features
//! once ([`lskip`]) and narrows the second by sampling a per-image class
//! subset ([`cskip`]). Both run on a small from-scratch transformer stack
//! ([`encoders`]) built on a reverse-mode differentiation core
//! ([`diffcore`]), with diagnostics and a synthetic benchmark to check the
//! speedups hold without changing what is learned.

pub mod bench;
pub mod container;
pub mod cskip;
pub mod diagnostics;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod lskip;
pub mod objective;
pub mod par;
pub mod rng;
pub mod step;

pub use error::{Error, Result};
