//! Spectral-dictionary token mixing.
//!
//! A sequence mixer built from K learnable complex-exponential atoms instead
//! of attention: analyze a length-L sequence against the atoms by regularized
//! least squares, gate the coefficients per channel, and synthesize back with
//! an optional per-position phase bias. On-grid dictionaries ride the FFT for
//! Theta(L log L) mixing with O(L) activations; a deliberately naive softmax
//! attention baseline provides the quadratic yardstick. The crate also ships
//! a small tape autograd, a toy vision-language model trained on rendered
//! shape scenes, and a benchmark harness that fits wall-time scaling slopes.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod complex;
pub mod config;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod matrix;
pub mod mixer;
pub mod model;
pub mod trainer;

pub use error::{Result, SdictError};
