//! Two-stage misbehavior detection for vehicular safety-message streams.
//!
//! Stage 1 scores windows with a BiGAN's reconstruction error and gates them
//! through interquartile thresholds; Stage 2 assigns attack classes with a
//! CNN-LSTM and flags unfamiliar windows through a reconstruction head.
//! [`compress`] prunes and quantizes trained models.

pub mod bench;
pub mod compress;
pub mod config;
pub mod container;
pub mod data;
pub mod detect;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod stage1;
pub mod stage2;
pub mod stats;
pub mod synth;

pub use error::{CoreError, Result};
