//! Plug-in posterior `φ(x; θ) = Pr_t(Y = 1 | X = x)` and the classifier
//! `1{φ > threshold}`.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;

use crate::data::Theta;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub phi: f64,
    pub label: u8,
    pub threshold: f64,
}

fn check_theta(theta: &Theta) -> Result<()> {
    let finite = theta.alpha1.is_finite()
        && theta.alpha2.is_finite()
        && theta
            .beta1
            .iter()
            .chain(&theta.beta2)
            .all(|b| b.is_finite());
    if !finite || !(0.0..=1.0).contains(&theta.pi) || theta.beta1.len() != theta.beta2.len() {
        return Err(Error::domain("theta must be finite with pi in [0, 1]"));
    }
    Ok(())
}

fn log_odds(theta: &Theta, x: &[f64]) -> f64 {
    let slope: f64 = theta
        .beta1
        .iter()
        .zip(&theta.beta2)
        .zip(x)
        .map(|((b1, b2), xi)| (b1 - b2) * xi)
        .sum();
    theta.pi.ln() - (1.0 - theta.pi).ln() + (theta.alpha1 - theta.alpha2) + slope
}

fn phi_unchecked(theta: &Theta, x: &[f64]) -> f64 {
    let z = log_odds(theta, x);
    sigmoid(z)
}

/// `φ(x; θ)`, evaluated as a logistic of the log-odds.
pub fn posterior(theta: &Theta, x: &[f64]) -> Result<f64> {
    check_theta(theta)?;
    if x.len() != theta.p() {
        return Err(Error::data(format!(
            "feature vector has {} entries, theta expects {}",
            x.len(),
            theta.p()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("feature vector contains non-finite values"));
    }
    Ok(phi_unchecked(theta, x))
}

/// Labels every row of `xs`; `φ` equal to the threshold predicts 0.
pub fn predict(theta: &Theta, xs: &Matrix, threshold: f64) -> Result<Vec<Prediction>> {
    check_theta(theta)?;
    if xs.ncols() != theta.p() {
        return Err(Error::data(format!(
            "feature matrix has {} columns, theta expects {}",
            xs.ncols(),
            theta.p()
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::domain("threshold must be finite"));
    }
    xs.rows()
        .map(|x| {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("feature matrix contains non-finite values"));
            }
            let phi = phi_unchecked(theta, x);
            Ok(Prediction {
                phi,
                label: u8::from(phi > threshold),
                threshold,
            })
        })
        .collect()
}

/// Fraction of predictions matching `truth`.
pub fn accuracy(preds: &[Prediction], truth: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::domain("accuracy of an empty prediction set"));
    }
    if preds.len() != truth.len() {
        return Err(Error::data(format!(
            "{} predictions but {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    let hits = preds
        .iter()
        .zip(truth)
        .filter(|(p, &t)| p.label == t)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean of `|φ(x; θ̂) - φ(x; θ°)|` over a target sample.
pub fn l1_posterior_distance(
    theta_hat: &Theta,
    theta_true: &Theta,
    sample: &Matrix,
) -> Result<f64> {
    check_theta(theta_hat)?;
    check_theta(theta_true)?;
    if sample.nrows() == 0 {
        return Err(Error::domain("empty sample"));
    }
    if theta_hat.p() != theta_true.p() || sample.ncols() != theta_hat.p() {
        return Err(Error::data("dimension mismatch between thetas and sample"));
    }
    let total: f64 = sample
        .rows()
        .map(|x| (phi_unchecked(theta_hat, x) - phi_unchecked(theta_true, x)).abs())
        .sum();
    Ok(total / sample.nrows() as f64)
}
