//! Conditional diffusion forecasting of multivariate daily returns.

pub mod characteristics;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod ensemble;
pub mod experiment;
pub mod error;
pub mod guidance;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod portfolio;
pub mod scoring;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
