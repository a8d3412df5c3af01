//! Weighting estimators of the local average treatment effect (LATE).
//!
//! The crate estimates the instrument propensity score by logit maximum
//! likelihood or by covariate balancing ([`ips`]), forms Abadie kappa
//! weights ([`kappa`]), computes the family of weighting estimators and the
//! linear IV benchmark ([`estimators`]), attaches stacked M-estimation
//! standard errors ([`inference`]) and runs Monte Carlo studies on the
//! built-in designs ([`simulation`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod ips;
pub mod kappa;
pub mod simulation;

pub use data::{load_csv, read_csv, validate, ColumnMap, Dataset, EstimatorKind};
pub use error::{LateError, Result};
pub use estimators::{delta_hat, estimate, linear_iv, tau_t_ipw, LateEstimate, ScoreSource};
pub use inference::{assemble, infer, sandwich, Scores};
pub use ips::{fit_cb, fit_ml, logistic, IpsFit, IpsMethod};
pub use kappa::{complier_means, complier_share, KappaWeights, Variant};
