//! Adaptively weighted two-stage Z-estimation for bandit-collected data.
//!
//! Adaptive experiments (UCB and friends) produce samples whose covariates
//! depend on past observations, which breaks the usual asymptotics of
//! least-squares and maximum-likelihood estimators: their errors can be
//! biased and non-normal even in large samples. This crate implements
//! estimators that restore asymptotic normality by splitting the data into
//! a pilot fold and an inference fold, fitting nuisance quantities on the
//! pilot fold, and solving an adaptively reweighted estimating equation on
//! the inference fold. The weights are built from the known per-round arm
//! selection probabilities, so valid confidence intervals come out with
//! known scale — no variance estimation needed.
//!
//! The crate covers partial-linear response models (identity link, additive
//! noise) and generalized-linear models (logistic link, Bernoulli
//! responses), each with a full-vector estimator and a cheaper
//! fixed-direction variant for inference on a single linear functional.
//! A simulation harness generates UCB-driven datasets, runs the estimators
//! alongside unweighted baselines over many replications, and reports
//! coverage of the resulting confidence intervals.

pub mod adaptz;
pub mod datagen;
pub mod error;
pub mod glmweights;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod pilot;
pub mod probvec;
pub mod rng;

pub use error::{Error, Result};
