//! Two-sample closeness testing for discrete distributions with
//! instance-dependent (local minimax) guarantees.
//!
//! The crate covers the probability model, Poissonized sampling, the four
//! sub-tests and their calibration, closed-form rate functionals, the
//! adversarial prior used for lower bounds, and a Monte Carlo harness that
//! compares empirical separation against the rates.

pub mod adversarial;
pub mod distmodel;
pub mod error;
pub mod harness;
pub mod io;
pub mod rates;
pub mod sampling;
pub mod testers;

pub use adversarial::{build_prior, AdversarialPrior, PriorDraw, PriorParams};
pub use distmodel::{make_distribution, DiscreteDistribution};
pub use error::{Error, Result};
pub use harness::{CompareReport, RiskEstimate, SeparationEstimate};
pub use rates::RateBreakdown;
pub use sampling::{RngStream, SplitCounts};
pub use testers::{calibrate_constants, combined_test, TestConstants, TestReport};
