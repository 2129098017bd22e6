//! Adversarial attacks on monocular depth estimation, at desk scale.
//!
//! The crate provides a small trainable encoder-decoder depth estimator as a
//! victim, a feature-annihilation attack loss over its intermediate
//! activations, generator-based perturbation attacks, transformation-robust
//! patch attacks, and an evaluation harness producing white-box, black-box
//! and cross-data reports.

pub mod autodiff;
pub mod data;
pub mod dfa;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod types;

pub use error::{DfaError, Result};

// Placeholder until the CLI module lands.
pub fn run_cli() -> i32 {
    eprintln!("cli not wired yet");
    2
}
