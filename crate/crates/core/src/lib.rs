//! Identification of reversible catenary compartmental systems from
//! measurements of the primary compartment.
//!
//! The pipeline is: [`model`] (rate constants and the ODE matrix),
//! [`simulator`] (spectral solution and sampling), [`fitter`]
//! (sum-of-exponentials fit of the primary curve), and [`identifier`]
//! (column-by-column recovery of every rate constant from the fitted
//! amplitudes and exponents). [`harness`] wires these into the CLI.
//!
//! All numerics are generic over [`Scalar`]; the `f64` aliases below are
//! what the CLI uses.

pub mod error;
pub mod fitter;
pub mod harness;
pub mod identifier;
pub mod linalg;
pub mod model;
pub mod prony;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CatenaryModel = model::CatenaryModel<f64>;
pub type OdeMatrix = model::OdeMatrix<f64>;
pub type SpectralData = simulator::SpectralData<f64>;
pub type MeasurementSeries = simulator::MeasurementSeries<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type FitResult = fitter::FitResult<f64>;
pub type IdentifiedSystem = identifier::IdentifiedSystem<f64>;
