//! Dynamic causal graph learning and multi-step forecasting for
//! multivariate time series.
//!
//! A variational GCN encoder maps each time step to per-node Gaussian
//! latents; a diffusion decoder scores lagged latent pairs with a learned
//! cross-covariance, yielding directed causal graphs and transition-density
//! graphs per step. A forecaster then runs dynamic graph convolutions over
//! those graphs, attends over time and adds a residual persistence path.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod gradcheck;
pub mod gradsuite;
pub mod graphs;
pub mod io;
pub mod metrics;
pub mod model_io;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use diffusion::{DiffusionParams, DynamicGraphSequence};
pub use encoder::{EncoderConfig, EncoderParams, LatentDistribution, LatentSample};
pub use error::{Error, Result};
pub use graphs::{EdgeSplit, Graph};
pub use tape::{ParamStore, Tape, Var};
pub use tensor::Tensor;
