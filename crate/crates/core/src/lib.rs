//! Estimators for a functional of an outcome that is missing not at random,
//! identified through an instrument that acts multiplicatively on the
//! nonresponse probability.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the observed-data table and the moment function `h(y; psi)`.
//! * [`learners`] and [`nuisance`] fit the nuisance regressions.
//! * [`binary`] and [`general`] evaluate the identification (plug-in) and
//!   influence-function estimators for binary and for discrete instruments.
//! * [`crossfit`] runs K-fold cross-fitting with median adjustment over splits.
//! * [`simulation`] generates data from the two reference designs, computes
//!   brute-force truths and runs Monte Carlo studies.

pub mod binary;
pub mod crossfit;
pub mod error;
pub mod general;
pub mod influence;
pub mod learners;
pub mod model;
pub mod nuisance;
pub mod rng;
pub mod simulation;
pub mod stats;

pub use error::{MivError, Result};
pub use model::{evaluate_h, validate_table, FunctionalSpec, ObservationTable, Violation};
pub use nuisance::{
    fit_nuisance_set, FittedNuisance, LearnerConfig, MarginalizationMode, Nuisance, NuisanceEval,
};
