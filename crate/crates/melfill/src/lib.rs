//! Masked log-mel spectrogram reconstruction conditioned on phonemes and a
//! phoneme-to-frame alignment, with the two inference pipelines that model
//! enables: text-based speech editing and prompt-based synthesis.
//!
//! The crate is organized around the data flow:
//!
//! - [`dsp`] turns PCM audio into log-mel spectrograms and reads/writes the
//!   feature cache format.
//! - [`alignment`] ingests forced-alignment files and derives the segment
//!   indices shared between a phoneme and its frames.
//! - [`masking`] plans phoneme-span and frame-span masks and substitutes the
//!   learned mask vector.
//! - [`autodiff`] is a small dense f64 tensor engine with reverse-mode
//!   differentiation.
//! - [`model`] builds the reconstruction network: joint acoustic-text
//!   embedding, Conformer encoder/decoder, refinement post-net, and the
//!   masked reconstruction objective.
//! - [`training`] runs Adam under a Noam schedule with length-binned
//!   batching and bit-exact checkpointing.
//! - [`inference`] implements speech editing and prompt-based synthesis on a
//!   trained model.
//! - [`eval`] scores masked regions with mel-cepstral distortion and renders
//!   spectrogram images.
//! - [`config`] and [`cli`] bind everything into reproducible runs.

pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod inference;
pub mod masking;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

/// Round half away from zero for non-negative values. Used for every
/// seconds-to-samples and ratio-to-count conversion so the rule is uniform.
pub fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= 0.0 && x.is_finite());
    (x + 0.5).floor() as usize
}
