//! Interacting-particle SGD for one-hidden-layer networks in the mean-field
//! scaling, the deterministic limit flow, and the fluctuation theory around
//! it: the `η = Ξ + Z` decomposition, Sobolev dual norms, the Gaussian
//! martingale limit and a Galerkin model of the limit SPDE.
//!
//! The particle code is generic over [`Scalar`] (`f32` or `f64`); the
//! statistics, Sobolev and SPDE layers work in `f64`. The aliases below fix
//! the common `f64` instantiations.

pub mod error;
pub mod fluctuation;
pub mod io;
pub mod meanfield;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod sgd;
pub mod sobolev;
pub mod spde;
pub mod stats;
#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
pub use fluctuation::{FluctuationSamples, GammaTerms, ReplicaSample};
pub use meanfield::{integrate_coupled, integrate_meanfield, integrate_meanfield_with, DriveKind, MeanFieldOptions};
pub use model::{Activation, ActivationKind, InitLaw, RunConfig, TestFunction};
pub use scalar::Scalar;
pub use sgd::{run_sgd, run_sgd_with, DiagnosticsSpec, SgdOptions};
pub use sobolev::{BasisFunction, SobolevDomain};
pub use spde::{GalerkinSystem, ProjectionGrid, SpdePaths};

pub type Dataset = model::DataDistribution<f64>;
pub type Ensemble = model::ParticleEnsemble<f64>;
pub type SgdRun = sgd::SgdTrajectory<f64>;
pub type MeanField = meanfield::MeanFieldTrajectory<f64>;
pub type Basis = sobolev::BasisFunction<f64>;

pub type Dataset32 = model::DataDistribution<f32>;
pub type Ensemble32 = model::ParticleEnsemble<f32>;
pub type SgdRun32 = sgd::SgdTrajectory<f32>;
pub type MeanField32 = meanfield::MeanFieldTrajectory<f32>;
