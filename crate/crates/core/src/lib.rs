//! Double exponential tilting model (DETM) for positive-and-unlabeled data.
//!
//! A labeled sample of positives from a source distribution is linked to an
//! unlabeled target sample through two log-linear density ratios, one per
//! target class. This crate estimates the model by empirical likelihood,
//! fitted with an EM algorithm whose M-step is a weighted three-class
//! multinomial logistic regression, and builds likelihood-ratio inference
//! (a SCAR goodness-of-fit test and confidence intervals for the target
//! positive proportion) and a plug-in Bayes classifier on top of it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the
//! Monte-Carlo harness and the command-line tool live in the `pudetm` crate.
#![no_std]
#![warn(missing_debug_implementations)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod classify;
pub mod data;
mod error;
pub mod estimation;
pub mod inference;
pub mod likelihood;
pub mod numerics;

pub use classify::{accuracy, l1_posterior_distance, posterior, predict, Prediction};
pub use data::{
    apply_feature_map, validate_dataset, ColumnExpr, Dataset, Diagnostics, FeatureMap, Theta,
};
pub use error::{Error, Result};
pub use estimation::{
    e_step, fit, fit_weighted_multinomial, fit_with_starts, is_degenerate, m_step,
    resolve_label_switch, FitOptions, FitResult, FittedModel, LabelRule, LabelSwitch, MStep,
    ModelKind, ModelSpec, DEGENERATE_SPREAD, PI_CLAMP,
};
pub use inference::{
    asymptotic_covariance, ci_pi, elr_curve, elr_pi, gof_test_scar, gof_test_scar_from_fit,
    ConfidenceInterval, CovarianceEstimate, CurvePoint, IntervalBound, ProfileLikelihood,
    TestResult,
};
pub use likelihood::{
    el_weights, lagrange_residual, log_el, profile, profile_log_el, q_objective, solve_lagrange,
    LagrangePair, MultinomialParams, ProfileValue, QEval,
};
pub use numerics::{
    chi2_cdf, chi2_quantile, chi2_sf, damped_newton, solve_spd, Matrix, NewtonOptions,
};
