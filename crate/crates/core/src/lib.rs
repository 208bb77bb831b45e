//! Small-scale data-free knowledge distillation.
//!
//! A frozen pre-trained teacher guides an adversarially trained generator
//! that synthesizes training samples; a fixed-capacity replay buffer with
//! priority-proportional sampling selects which synthetic samples drive
//! student distillation. Everything runs on a minimal reverse-mode autodiff
//! core over dense f64 arrays, deterministically from a single seed.

pub mod ad;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod nn;
pub mod replay;

pub use error::{Error, Result};
