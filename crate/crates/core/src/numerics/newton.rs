use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::inf_norm;
use super::linalg::{solve_spd, Matrix};
use crate::error::{Error, Result};

/// A smooth concave function to be maximized.
///
/// Evaluations outside the open feasible domain return `None`; the line
/// search treats those like a failed step.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Value, gradient and Hessian at `x`.
    fn evaluate(&self, x: &[f64], grad: &mut [f64], hess: &mut Matrix) -> Option<f64>;

    /// Value and gradient only; override when the Hessian dominates the cost.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        let mut hess = Matrix::zeros(self.dim(), self.dim());
        self.evaluate(x, grad, &mut hess)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_halving_max: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-10,
            step_halving_max: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Relative size of a Newton step above which a point with a tiny gradient
/// is treated as a runaway (flat asymptote) rather than an optimum.
const RUNAWAY_STEP: f64 = 1e-4;

fn newton_direction(hess: &Matrix, grad: &[f64]) -> Result<Vec<f64>> {
    let mut neg = hess.clone();
    neg.scale(-1.0);
    match solve_spd(&neg, grad) {
        Ok(d) => Ok(d),
        Err(_) => {
            for i in 0..neg.nrows() {
                neg[(i, i)] += 1e-10;
            }
            solve_spd(&neg, grad)
        }
    }
}

/// Maximizes `f` by Newton's method with step halving.
///
/// A step is accepted only if it stays feasible and does not decrease the
/// objective. When the objective change is below rounding level the step
/// is accepted if it shrinks the gradient instead. Convergence requires
/// both `‖g‖∞ ≤ grad_tol` and a Newton step that is small relative to the
/// iterate, so drifting towards an asymptote (e.g. separable logistic
/// data) is reported as non-convergence rather than success.
pub fn damped_newton<F: Objective + ?Sized>(
    f: &F,
    x0: Vec<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonSolution> {
    newton_core(f, x0, opts, None)
}

/// Gradient reduction per step below which a reused Hessian is kept.
const REUSE_RATIO: f64 = 0.25;

/// Like [`damped_newton`], but starts from the Hessian in `cache` when
/// present and keeps it while it still cuts the gradient by a factor of
/// four per step. The Hessian in use at exit is left in `cache`. Suited to
/// sequences of closely related problems.
pub(crate) fn damped_newton_reusing<F: Objective + ?Sized>(
    f: &F,
    x0: Vec<f64>,
    opts: &NewtonOptions,
    cache: &mut Option<Matrix>,
) -> Result<NewtonSolution> {
    newton_core(f, x0, opts, Some(cache))
}

fn newton_core<F: Objective + ?Sized>(
    f: &F,
    x0: Vec<f64>,
    opts: &NewtonOptions,
    mut cache: Option<&mut Option<Matrix>>,
) -> Result<NewtonSolution> {
    let n = f.dim();
    if x0.len() != n {
        return Err(Error::data("damped_newton: start has wrong dimension"));
    }
    if opts.max_iter == 0 || !(opts.grad_tol > 0.0) {
        return Err(Error::config(
            "damped_newton: max_iter >= 1 and grad_tol > 0 required",
        ));
    }
    let reuse = cache.is_some();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let cached = cache
        .as_deref_mut()
        .and_then(Option::take)
        .filter(|h| h.nrows() == n && h.ncols() == n);
    let (start_value, mut hess, mut hess_current) = match cached {
        Some(h) => (f.value_grad(&x, &mut grad), h, false),
        None => {
            let mut h = Matrix::zeros(n, n);
            (f.evaluate(&x, &mut grad, &mut h), h, true)
        }
    };
    let mut value =
        start_value.ok_or_else(|| Error::domain("damped_newton: infeasible starting point"))?;
    // length of the last accepted step; a small gradient only counts as
    // convergence once the steps have become small too
    let mut last_step = f64::INFINITY;
    // whether the Hessian in hand may be kept for the next step
    let mut keep = !hess_current;

    let mut trial = vec![0.0; n];
    let mut tgrad = vec![0.0; n];
    let done = |x: Vec<f64>,
                value: f64,
                gnorm: f64,
                iter: usize,
                hess: Matrix,
                cache: Option<&mut Option<Matrix>>| {
        if let Some(c) = cache {
            *c = Some(hess);
        }
        Ok(NewtonSolution {
            x,
            value,
            grad_norm: gnorm,
            iterations: iter,
        })
    };

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&grad);
        let xnorm = inf_norm(&x);
        let small_step = |s: f64| s <= RUNAWAY_STEP * (1.0 + xnorm);
        if gnorm <= opts.grad_tol && small_step(last_step) {
            return done(x, value, gnorm, iter, hess, cache);
        }
        if !hess_current && !(reuse && keep) {
            value = f.evaluate(&x, &mut grad, &mut hess).ok_or_else(|| {
                Error::domain("damped_newton: objective undefined at accepted iterate")
            })?;
            hess_current = true;
        }
        let dir = newton_direction(&hess, &grad)?;
        if gnorm <= opts.grad_tol && small_step(inf_norm(&dir)) {
            return done(x, value, gnorm, iter, hess, cache);
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.step_halving_max {
            for ((ti, xi), di) in trial.iter_mut().zip(&x).zip(&dir) {
                *ti = xi + t * di;
            }
            if let Some(v) = f.value_grad(&trial, &mut tgrad) {
                let noise = 64.0 * f64::EPSILON * (1.0 + value.abs());
                if v.is_finite() && (v >= value || (v >= value - noise && inf_norm(&tgrad) < gnorm))
                {
                    accepted = true;
                    value = v;
                    core::mem::swap(&mut x, &mut trial);
                    core::mem::swap(&mut grad, &mut tgrad);
                    last_step = t * inf_norm(&dir);
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            if !hess_current {
                // stale curvature; retry from here with a fresh Hessian
                keep = false;
                continue;
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                reason: format!("line search failed with gradient norm {gnorm:.3e}"),
                last: x,
            });
        }
        keep = t == 1.0 && inf_norm(&grad) <= REUSE_RATIO * gnorm;
        hess_current = false;
    }
    let gnorm = inf_norm(&grad);
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        reason: format!("iteration limit reached with gradient norm {gnorm:.3e}"),
        last: x,
    })
}
