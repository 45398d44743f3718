//! Joint learning of a probabilistic k-space undersampling pattern and a
//! residual reconstruction network, trained end to end through an exact
//! matrix-form inverse Fourier layer.

pub mod baselines;
pub mod data;
pub mod error;
pub mod formats;
pub mod fourier;
pub mod grid;
pub mod pipeline;
pub mod recnet;
pub mod sampler;

pub use error::{Error, Result};
pub use grid::{ComplexGrid, ProbabilityMatrix, RealImage, SamplingMask, TwoChannelGrid};
