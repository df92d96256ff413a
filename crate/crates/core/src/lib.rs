//! Uncertainty-guided dual attention segmentation for seedling images.

pub mod ablation;
pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod supervision;
pub mod synthetic;
pub mod train;
pub mod viz;

pub use error::{Result, SegError};
