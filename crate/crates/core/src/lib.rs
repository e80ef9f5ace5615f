//! Core of an interactive annotation workbench for volumetric scans.
//!
//! A reader labels pixels of a [`volume::Volume`] through an
//! [`annotation::Annotator`] while a [`trainer::Trainer`] fits a small
//! convolutional autoencoder ([`cae::Cae`]) to the partial labels and
//! streams back versioned per-pixel predictions. The same crate holds the
//! offline pieces: a synthetic texture generator, the depth study,
//! agreement statistics between readers and SUS scoring.
//!
//! Numerical code is generic over [`scalar::Scalar`]; `f64` is used for
//! gradient checks and studies, `f32` for interactive training.

pub mod annotation;
pub mod cae;
pub mod metrics;
pub mod scalar;
pub mod study;
pub mod sus;
pub mod synth;
pub mod trainer;
pub mod volume;

pub type Cae32 = cae::Cae<f32>;
pub type Cae64 = cae::Cae<f64>;
pub type PredictionMap32 = cae::PredictionMap<f32>;
pub type PredictionMap64 = cae::PredictionMap<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
