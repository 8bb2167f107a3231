//! Adaptive multi-source distribution fusion.
//!
//! A set of frozen source models each provide a next-token distribution
//! matrix for a text. A trainable selection network scores the sources per
//! sample, keeps those above a probability threshold, and fuses their
//! matrices with renormalized weights. A small target language model is then
//! trained against both the ground-truth tokens and the fused matrix, with a
//! coefficient-of-variation penalty that keeps source usage from collapsing.

pub mod align;
pub mod error;
pub mod fusion;
pub mod numcore;
pub mod objective;
pub mod rng;
pub mod selector;
pub mod synthbench;
pub mod trainer;

pub use error::{FuseError, Result};
pub use numcore::{GradStore, LmDims, OneHotLabels, ParamSet, ParamTensor, ProbMatrix, TinyLM, TokenSeq};
