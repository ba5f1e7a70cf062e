//! Appearance-based gaze estimation with gaze decomposition.
//!
//! Gaze labels are modelled as a subject-independent visual-axis gaze plus a
//! subject-dependent additive bias. This crate provides:
//!
//! - [`synthworld`]: a generative world with known per-subject biases,
//! - [`estimator`] and [`trainer`]: the visual-axis estimator and the joint
//!   fit of estimator parameters and per-subject training biases,
//! - [`calibration`]: offset calibration from single or multiple gaze points,
//!   plus fine-tuning and linear-adaptation baselines,
//! - [`evaluation`]: Monte-Carlo calibration protocols, location-robustness
//!   grids, bias/variance analysis and the no-decomposition ablation,
//! - [`cli`]: the `gazedecomp` experiment runner.
//!
//! All angles are in degrees and expressed as yaw/pitch pairs.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::GazeAngle;
