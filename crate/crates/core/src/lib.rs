//! Simulation, feature extraction and evaluation toolkit for narrowband
//! radio signal classification.
//!
//! - [`sigsim`]: seven signal classes as complex 8-bit time series
//! - [`spectro`]: log-power and phase spectrogram images
//! - [`dataset`]: corpora on disk, k-fold splits and amplitude sweeps
//! - [`detector`]: brute-force linear drift search baseline
//! - [`evalx`]: confusion matrices, precision/recall/F1, sweep reports

pub mod dataset;
pub mod detector;
pub mod evalx;
pub mod rng;
pub mod sigsim;
pub mod spectro;

pub use sigsim::{SignalClass, NUM_CLASSES, NOISE_SIGMA, SIM_LEN};
