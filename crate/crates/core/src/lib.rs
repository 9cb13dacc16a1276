//! Conformal prediction under distribution shift, with physics-informed
//! predictors for road traffic and epidemic case counts.
//!
//! The crate is organised in three layers:
//!
//! * **Conformal core** — [`conformal`] implements split conformal
//!   prediction on absolute-residual scores; [`weighted`] extends it to
//!   covariate shift by reweighting calibration scores with likelihood
//!   ratios estimated through Gaussian kernel density estimation.
//! * **Diagnostics** — [`diagnostics`] quantifies how far a deployed
//!   predictor's nominal coverage drifts from its realised coverage
//!   (coverage divergence) and summarises the drift across confidence
//!   levels with two Wasserstein-distance estimators.
//! * **Domain models** — [`traffic`] fits reaction–diffusion speed models
//!   on sensor graphs, [`epidemic`] fits discrete-time SIR/SIS
//!   compartment models on weekly case counts, and [`data`] handles CSV
//!   ingestion, chronological splits, test-domain partitioning, and
//!   synthetic world generation. [`pipeline`] wires everything into a
//!   reproducible experiment harness.
//!
//! Numeric routines are generic over the scalar type through the
//! [`scalar::Real`] bound, so the same code runs in `f32` or `f64`;
//! concrete `f64` aliases are re-exported at the crate root since that is
//! what the experiment harness and the CSV formats use.
//!
//! # Quick start
//!
//! ```
//! use shiftcp::conformal::{augmented_quantile, ConfidenceLevel, ScoreSet, ScoreSource};
//!
//! let cal = ScoreSet::new(vec![0.3, 1.1, 0.7, 0.2], ScoreSource::Calibration).unwrap();
//! let level = ConfidenceLevel::new(0.5).unwrap();
//! let q = augmented_quantile(level, &cal).unwrap();
//! assert!(q.covers(0.5));
//! ```

#![warn(missing_docs)]

pub mod conformal;
pub mod data;
pub mod diagnostics;
pub mod epidemic;
pub mod error;
pub mod pipeline;
pub mod scalar;
pub mod traffic;
pub mod weighted;

pub use error::{Error, Result};

/// Calibration/test score multiset over `f64`, the harness scalar type.
pub type ScoreSet = conformal::ScoreSet<f64>;
/// Miscoverage level over `f64`.
pub type ConfidenceLevel = conformal::ConfidenceLevel<f64>;
/// Real-or-infinity quantile over `f64`.
pub type Quantile = conformal::Quantile<f64>;
/// Symmetric prediction interval over `f64`.
pub type PredictionInterval = conformal::PredictionInterval<f64>;
/// Reweighted calibration-score distribution over `f64`.
pub type WeightedDistribution = weighted::WeightedDistribution<f64>;
/// Gaussian kernel density estimate over `f64`.
pub type KdeModel = weighted::KdeModel<f64>;
/// Per-level coverage diagnostic over `f64`.
pub type DivergencePoint = diagnostics::DivergencePoint<f64>;
/// Per-(model, domain) diagnostic report over `f64`.
pub type DivergenceReport = diagnostics::DivergenceReport<f64>;
