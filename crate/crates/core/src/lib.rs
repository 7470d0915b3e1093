//! Random-feature latent variable models with Dirichlet-process mixture
//! spectral kernels, fitted by block coordinate descent variational inference.

pub mod adam;
pub mod bcd;
pub mod cli;
pub mod datasets;
pub mod dp_mixture;
pub mod error;
pub mod eval;
pub mod features;
pub mod gaussian;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod logistic;
pub mod model;
pub mod polya_gamma;
pub mod rng;
pub mod scalar;
#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Params32 = model::ModelParams<f32>;
pub type Params64 = model::ModelParams<f64>;
pub type FitState32 = bcd::FitState<f32>;
pub type FitState64 = bcd::FitState<f64>;
pub type Observations32 = gaussian::ObservationSet<f32>;
pub type Observations64 = gaussian::ObservationSet<f64>;
pub type Mixture32 = dp_mixture::SpectralMixture<f32>;
pub type Mixture64 = dp_mixture::SpectralMixture<f64>;
