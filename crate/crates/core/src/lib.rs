//! Estimation engine for the causal effect of a treatment on a binary
//! outcome measured before and after treatment, in two-arm randomized
//! studies with non-compliance in both arms.
//!
//! The estimator works in two steps: a multinomial logit for membership in
//! the complier / never-taker / always-taker subpopulations, followed by a
//! weighted conditional logistic fit over discordant outcome pairs whose
//! weights come from step 1. Standard errors come from a sandwich formula
//! over the stacked estimating equations. Baseline conditional-logistic
//! estimators and a generative-model simulator support verification.

pub mod baselines;
pub mod causal;
pub mod cli;
pub mod compliance;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod mc;
pub mod model;
pub mod numerics;
pub mod report;
pub mod sim;
pub mod variance;

pub use causal::{causal_delta, fit_step2, CausalFit, CausalParams};
pub use compliance::{bic_select, fit_step1, ComplianceModelFit, ComplianceParams};
pub use error::{Error, Result};
pub use model::{build_design, Dataset, DesignSpec, DesignTerm, SubjectRecord};
pub use numerics::{newton_maximize, NewtonSettings};
pub use sim::{sample, scenario, SimConfig};
pub use variance::{sandwich, wald_table, SandwichCovariance, WaldRow};
