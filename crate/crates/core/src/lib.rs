//! Desk-scale toolkit for unsupervised salient object detection.
//!
//! The crate trains a small convolutional detector without any human labels:
//! stage 1 distills the network's own activation maps into increasingly
//! confident saliency predictions, guided by an appearance-texture matching
//! penalty at object boundaries and a multi-scale consistency term; stage 2
//! retrains a fresh detector on the pseudo labels exported by stage 1.
//!
//! Everything runs on the CPU in `f64`. The differentiable parts are built on
//! a small recorded-graph reverse-mode engine in [`gridcore`]; runs are
//! bitwise reproducible given a seed.

pub mod error;
mod textfmt;
pub mod gridcore;
pub mod texture;
pub mod losses;
pub mod model;
pub mod data;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
