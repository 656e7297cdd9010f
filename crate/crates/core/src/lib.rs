//! Perturbed-dataset hypothesis tests with exact finite-sample confidence
//! levels.
//!
//! A candidate parameter θ is scored on `m` perturbed copies of the data
//! (sign-flipped or permuted residuals); θ is accepted unless the score on
//! the unperturbed data is among the `q` largest, giving an exact level
//! `1 − q/m` whenever the perturbations leave the noise distribution
//! invariant.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual double-precision instantiation.

pub mod coverage;
pub mod error;
pub mod linalg;
pub mod linreg;
pub mod oe;
pub mod perturbation;
pub mod region;
pub mod repro;
pub mod scalar;
pub mod types;

pub use coverage::{CoverageConfig, CoverageReport, NoiseModel, NoiseSpec, Problem};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use linreg::{QuadraticForm, WeightingChoice};
pub use oe::{OeTheta, SensitivityMatrix};
pub use perturbation::{Ordering, PerformanceVector};
pub use region::{ComponentLabeling, Connectivity, GridSpec, MembershipGrid};
pub use repro::{ReproOptions, ReproSummary};
pub use scalar::Scalar;
pub use types::{IoDataset, Method, PerturbationSetup, RankRule, RegressionDataset, TestVerdict};

pub type RegressionDatasetF64 = RegressionDataset<f64>;
pub type RegressionDatasetF32 = RegressionDataset<f32>;
pub type IoDatasetF64 = IoDataset<f64>;
pub type IoDatasetF32 = IoDataset<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type OeThetaF64 = OeTheta<f64>;
pub type TestVerdictF64 = TestVerdict<f64>;
pub type PerformanceVectorF64 = PerformanceVector<f64>;
