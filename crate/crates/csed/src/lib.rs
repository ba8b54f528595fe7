//! Per-frame multi-label sound event detection.
//!
//! The crate trains three detector variants on spectrogram-like inputs: an
//! independent per-class sigmoid head, a recurrent head over time, and a
//! classifier chain that conditions each class on the classes already decided
//! for the same frame. Everything runs on a small f64 tape kernel so results
//! are bit-reproducible across runs on the same target.

pub mod chainorder;
pub mod data;
pub mod experiment;
pub mod featex;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod train;
