//! Robustness radius for regression robustness checks.
//!
//! Stacks a main regression and its robustness checks, estimates their joint
//! covariance, and reports the smallest bound on the main-vs-check distance
//! that a conditional chi-square moment-inequality test does not reject.

pub mod covariance;
pub mod cstest;
pub mod data;
pub mod dist;
pub mod error;
pub mod exchange;
pub mod filter;
pub mod qp;
pub mod radius;
pub mod regress;
pub mod sensitivity;
pub mod simlab;
pub mod study;

pub use covariance::{bootstrap_cov, plugin_cov_iid, BootstrapConfig, CovarianceEstimate};
pub use cstest::{cc_test, project_qp, rcc_test, DfConvention, TestOutcome, Variant};
pub use data::{Dataset, Specification};
pub use error::{Error, Result};
pub use radius::{robustness_radius, RadiusOptions, RadiusReport};
pub use regress::{fit_fwl, EstimateBundle, FwlFit};
pub use sensitivity::{bias_from_tau, tau_from_radius, SensitivityInputs};
pub use simlab::{run_scenario, table1, Scenario, SimSummary};
