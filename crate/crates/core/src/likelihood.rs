//! Empirical-likelihood machinery.
//!
//! For fixed structural parameters the point masses `p_i` on the pooled
//! sample are profiled out through two Lagrange multipliers. With
//! `g_ti = exp(alpha_t + x_i·beta_t) - 1` the weights are
//! `p_i = 1 / (N (1 + λ1 g_1i + λ2 g_2i))` and the multipliers solve
//! `Σ_i g_ti / (1 + λ·g_i) = 0`. The profile log-EL is the value of
//! `h(λ, θ) = -Σ_i log(1 + λ·g_i) + Σ_j log{π e^{η1_j} + (1-π) e^{η2_j}}`
//! at that solution, which is the minimum of the convex function `h` in λ.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;

use crate::data::{Dataset, Theta};
use crate::error::{Error, Result};
use crate::numerics::{damped_newton, dot, KahanSum, Matrix, NewtonOptions, Objective};

/// Lagrange multipliers of the two normalization constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangePair {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Set when the system does not determine both multipliers (a tilt that
    /// is identically one, or two identical tilts); the undetermined part
    /// follows a fixed convention.
    pub degenerate: bool,
}

impl LagrangePair {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            degenerate: false,
        }
    }

    pub(crate) fn denominator(&self, g: [f64; 2]) -> f64 {
        1.0 + self.lambda1 * g[0] + self.lambda2 * g[1]
    }

    pub fn swapped(&self) -> Self {
        Self {
            lambda1: self.lambda2,
            lambda2: self.lambda1,
            degenerate: self.degenerate,
        }
    }
}

/// `(α1 + x_i·β1, α2 + x_i·β2)` for every pooled row.
pub(crate) fn tilts(ds: &Dataset, theta: &Theta) -> Vec<[f64; 2]> {
    ds.features()
        .rows()
        .map(|x| [theta.log_ratio1(x), theta.log_ratio2(x)])
        .collect()
}

fn constraint_terms(eta: &[[f64; 2]]) -> Vec<[f64; 2]> {
    eta.iter().map(|e| [e[0].exp_m1(), e[1].exp_m1()]).collect()
}

/// `Σ log D_i` maximized over λ (the negative of the λ-part of `h`).
struct DualObjective<'a> {
    g: &'a [[f64; 2]],
}

impl Objective for DualObjective<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, lam: &[f64], grad: &mut [f64], hess: &mut Matrix) -> Option<f64> {
        let mut v = KahanSum::default();
        let (mut g0, mut g1) = (0.0, 0.0);
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
        for gi in self.g {
            let d = 1.0 + lam[0] * gi[0] + lam[1] * gi[1];
            if !(d > 0.0) {
                return None;
            }
            v.add(d.ln());
            let (a, b) = (gi[0] / d, gi[1] / d);
            g0 += a;
            g1 += b;
            h00 -= a * a;
            h01 -= a * b;
            h11 -= b * b;
        }
        grad[0] = g0;
        grad[1] = g1;
        hess[(0, 0)] = h00;
        hess[(0, 1)] = h01;
        hess[(1, 0)] = h01;
        hess[(1, 1)] = h11;
        Some(v.value())
    }
}

/// One-multiplier version used when only one direction is identified.
struct DualObjective1 {
    g: Vec<f64>,
}

impl Objective for DualObjective1 {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, s: &[f64], grad: &mut [f64], hess: &mut Matrix) -> Option<f64> {
        let mut v = KahanSum::default();
        let (mut g, mut h) = (0.0, 0.0);
        for &gi in &self.g {
            let d = 1.0 + s[0] * gi;
            if !(d > 0.0) {
                return None;
            }
            v.add(d.ln());
            let a = gi / d;
            g += a;
            h -= a * a;
        }
        grad[0] = g;
        hess[(0, 0)] = h;
        Some(v.value())
    }
}

/// Whether the origin lies in the interior of the convex hull of `pts`.
fn origin_in_hull_interior(pts: &[[f64; 2]]) -> bool {
    let mut angles: Vec<f64> = pts
        .iter()
        .filter(|v| v[0] != 0.0 || v[1] != 0.0)
        .map(|v| v[1].atan2(v[0]))
        .collect();
    if angles.len() < 3 {
        return false;
    }
    angles.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    let wrap = angles[0] + 2.0 * core::f64::consts::PI - angles[angles.len() - 1];
    let widest = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    widest < core::f64::consts::PI - 1e-12
}

fn dual_tolerance(g: &[[f64; 2]]) -> f64 {
    let scale: f64 = g.iter().map(|v| v[0].abs() + v[1].abs()).sum();
    (64.0 * f64::EPSILON * scale).max(1e-10)
}

fn solve_one_dim(g: Vec<f64>, start: f64) -> Result<f64> {
    if !(g.iter().any(|&v| v > 0.0) && g.iter().any(|&v| v < 0.0)) {
        return Err(Error::Feasibility(
            "zero is not inside the range of the constraint terms".into(),
        ));
    }
    let scale: f64 = g.iter().map(|v| v.abs()).sum();
    let opts = NewtonOptions {
        grad_tol: (64.0 * f64::EPSILON * scale).max(1e-10),
        ..NewtonOptions::default()
    };
    let f = DualObjective1 { g };
    let feasible = |s: f64| f.g.iter().all(|&gi| 1.0 + s * gi > 0.0);
    let x0 = if feasible(start) { start } else { 0.0 };
    Ok(damped_newton(&f, vec![x0], &opts)?.x[0])
}

fn solve_from_terms(g: &[[f64; 2]], pi: f64, c: f64) -> Result<LagrangePair> {
    let first_zero = g.iter().all(|v| v[0] == 0.0);
    let second_zero = g.iter().all(|v| v[1] == 0.0);
    if first_zero && second_zero {
        return Ok(LagrangePair {
            lambda1: 0.0,
            lambda2: 0.0,
            degenerate: true,
        });
    }
    if first_zero || second_zero {
        let t = usize::from(first_zero);
        let start = if first_zero { c * (1.0 - pi) } else { c * pi };
        let s = solve_one_dim(g.iter().map(|v| v[t]).collect(), start)?;
        let (lambda1, lambda2) = if first_zero { (0.0, s) } else { (s, 0.0) };
        return Ok(LagrangePair {
            lambda1,
            lambda2,
            degenerate: true,
        });
    }
    if g.iter().all(|v| v[0] == v[1]) {
        // identical tilts: only λ1 + λ2 is identified; split it as π : 1-π
        let s = solve_one_dim(g.iter().map(|v| v[0]).collect(), c)?;
        return Ok(LagrangePair {
            lambda1: pi * s,
            lambda2: (1.0 - pi) * s,
            degenerate: true,
        });
    }
    if !origin_in_hull_interior(g) {
        return Err(Error::Feasibility(
            "zero is not inside the convex hull of the constraint terms".into(),
        ));
    }
    let f = DualObjective { g };
    let opts = NewtonOptions {
        grad_tol: dual_tolerance(g),
        ..NewtonOptions::default()
    };
    let warm = LagrangePair::new(c * pi, c * (1.0 - pi));
    let x0 = if g.iter().all(|&gi| warm.denominator(gi) > 0.0) {
        vec![warm.lambda1, warm.lambda2]
    } else {
        vec![0.0, 0.0]
    };
    let sol = match damped_newton(&f, x0.clone(), &opts) {
        Ok(s) => s,
        Err(_) if x0 != [0.0, 0.0] => damped_newton(&f, vec![0.0, 0.0], &opts)?,
        Err(e) => return Err(e),
    };
    Ok(LagrangePair::new(sol.x[0], sol.x[1]))
}

/// Solves the two multiplier equations for `theta`.
///
/// Newton's method starts from `(cπ, c(1-π))` with `c = m/N`, falling back
/// to `(0, 0)`. Returns a feasibility error when zero is not an interior
/// point of the convex hull of the constraint terms, in which case no
/// finite solution exists.
pub fn solve_lagrange(ds: &Dataset, theta: &Theta) -> Result<LagrangePair> {
    check_theta(ds, theta)?;
    let g = constraint_terms(&tilts(ds, theta));
    solve_from_terms(&g, theta.pi, ds.target_fraction())
}

/// Residuals `Σ_i g_ti / D_i` of the multiplier equations.
pub fn lagrange_residual(ds: &Dataset, theta: &Theta, lam: &LagrangePair) -> [f64; 2] {
    let g = constraint_terms(&tilts(ds, theta));
    let mut r = [0.0; 2];
    for gi in &g {
        let d = lam.denominator(*gi);
        r[0] += gi[0] / d;
        r[1] += gi[1] / d;
    }
    r
}

fn check_theta(ds: &Dataset, theta: &Theta) -> Result<()> {
    theta.validate()?;
    if theta.p() != ds.p() {
        return Err(Error::data(format!(
            "theta has dimension {} but data has {} features",
            theta.p(),
            ds.p()
        )));
    }
    Ok(())
}

/// Empirical-likelihood weights `p_i = N⁻¹ / (1 + λ·g_i)`.
pub fn el_weights(ds: &Dataset, theta: &Theta, lam: &LagrangePair) -> Result<Vec<f64>> {
    check_theta(ds, theta)?;
    let big_n = ds.total() as f64;
    constraint_terms(&tilts(ds, theta))
        .into_iter()
        .enumerate()
        .map(|(i, gi)| {
            let d = lam.denominator(gi);
            if d > 0.0 {
                Ok(1.0 / (big_n * d))
            } else {
                Err(Error::Feasibility(format!(
                    "non-positive weight denominator at row {i}"
                )))
            }
        })
        .collect()
}

/// Profile log-EL together with the multipliers it was evaluated at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileValue {
    pub value: f64,
    pub lambda: LagrangePair,
}

/// Profile log-EL `ℓ_N(θ)` and its multipliers.
pub fn profile(ds: &Dataset, theta: &Theta) -> Result<ProfileValue> {
    check_theta(ds, theta)?;
    let eta = tilts(ds, theta);
    let g = constraint_terms(&eta);
    let lambda = solve_from_terms(&g, theta.pi, ds.target_fraction())?;
    let mut total = KahanSum::default();
    for (i, (gi, ei)) in g.iter().zip(&eta).enumerate() {
        let d = lambda.denominator(*gi);
        if !(d > 0.0) {
            return Err(Error::Feasibility(format!(
                "non-positive weight denominator at row {i}"
            )));
        }
        total.add(-d.ln());
        if !ds.is_source(i) {
            total.add(theta.log_mixture_from_tilts(ei[0], ei[1]));
        }
    }
    Ok(ProfileValue {
        value: total.value(),
        lambda,
    })
}

/// Profile log-EL `ℓ_N(θ)`; equals `ℓ_EL + N log N` at the optimal weights.
pub fn profile_log_el(ds: &Dataset, theta: &Theta) -> Result<f64> {
    Ok(profile(ds, theta)?.value)
}

/// Per-row contributions to `h(λ, θ)`; `None` when some `D_i ≤ 0`.
pub(crate) fn h_contributions(ds: &Dataset, lam: &LagrangePair, theta: &Theta) -> Option<Vec<f64>> {
    ds.features()
        .rows()
        .enumerate()
        .map(|(i, x)| {
            let e1 = theta.log_ratio1(x);
            let e2 = theta.log_ratio2(x);
            let d = lam.denominator([e1.exp_m1(), e2.exp_m1()]);
            if !(d > 0.0) {
                return None;
            }
            let mut v = -d.ln();
            if !ds.is_source(i) {
                v += theta.log_mixture_from_tilts(e1, e2);
            }
            Some(v)
        })
        .collect()
}

/// Log-EL `Σ log p_i + Σ_j log{π e^{η1_j} + (1-π) e^{η2_j}}` at given weights.
pub fn log_el(ds: &Dataset, theta: &Theta, weights: &[f64]) -> f64 {
    let mut total = KahanSum::default();
    for (i, (x, &p)) in ds.features().rows().zip(weights).enumerate() {
        total.add(p.ln());
        if !ds.is_source(i) {
            total.add(theta.log_mixture(x));
        }
    }
    total.value()
}

/// As [`log_el`] but from log-weights, which stay finite when a weight
/// underflows.
pub(crate) fn log_el_from_log_weights(ds: &Dataset, theta: &Theta, log_weights: &[f64]) -> f64 {
    let mut total = KahanSum::default();
    for (i, (x, &lp)) in ds.features().rows().zip(log_weights).enumerate() {
        total.add(lp);
        if !ds.is_source(i) {
            total.add(theta.log_mixture(x));
        }
    }
    total.value()
}

/// Parameters of the three-class multinomial logistic M-step objective:
/// shifted intercepts `α_t* = α_t + log(s_t / n)` and the two slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialParams {
    pub alpha1s: f64,
    pub alpha2s: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
}

impl MultinomialParams {
    pub fn zeros(p: usize) -> Self {
        Self {
            alpha1s: 0.0,
            alpha2s: 0.0,
            beta1: vec![0.0; p],
            beta2: vec![0.0; p],
        }
    }

    /// Flattens as `[α1*, β1, α2*, β2]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.beta1.len() + 2);
        v.push(self.alpha1s);
        v.extend_from_slice(&self.beta1);
        v.push(self.alpha2s);
        v.extend_from_slice(&self.beta2);
        v
    }

    pub fn from_vec(v: &[f64]) -> Self {
        let d = v.len() / 2;
        Self {
            alpha1s: v[0],
            beta1: v[1..d].to_vec(),
            alpha2s: v[d],
            beta2: v[d + 1..].to_vec(),
        }
    }
}

/// Value, gradient and Hessian of the M-step objective.
#[derive(Debug, Clone, PartialEq)]
pub struct QEval {
    pub value: f64,
    /// Gradient in the `[α1*, β1, α2*, β2]` layout.
    pub grad: Vec<f64>,
    pub hess: Matrix,
}

/// The M-step objective as a Newton problem. A frozen class `t` is pinned
/// at `(α_t*, β_t) = (value, 0)`; the free parameters are the remaining
/// `[α_t*, β_t]` blocks in class order.
pub(crate) struct QProblem<'a> {
    pub ds: &'a Dataset,
    pub omega: &'a [f64],
    pub frozen: [Option<f64>; 2],
}

impl QProblem<'_> {
    fn free(&self) -> [bool; 2] {
        [self.frozen[0].is_none(), self.frozen[1].is_none()]
    }

    /// Splits a free-parameter vector into per-class `(α*, β)`.
    pub(crate) fn unpack<'v>(&self, params: &'v [f64]) -> [(f64, Option<&'v [f64]>); 2] {
        let d = self.ds.p() + 1;
        let mut offset = 0;
        let mut out = [(0.0, None); 2];
        for (slot, frozen) in out.iter_mut().zip(self.frozen) {
            *slot = match frozen {
                Some(a) => (a, None),
                None => {
                    let block = &params[offset..offset + d];
                    offset += d;
                    (block[0], Some(&block[1..]))
                }
            };
        }
        out
    }
}

impl Objective for QProblem<'_> {
    fn dim(&self) -> usize {
        self.free().iter().filter(|&&f| f).count() * (self.ds.p() + 1)
    }

    fn evaluate(&self, params: &[f64], grad: &mut [f64], hess: &mut Matrix) -> Option<f64> {
        self.eval(params, grad, Some(hess))
    }

    fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> Option<f64> {
        self.eval(params, grad, None)
    }
}

impl QProblem<'_> {
    fn eval(&self, params: &[f64], grad: &mut [f64], hess: Option<&mut Matrix>) -> Option<f64> {
        let d = self.ds.p() + 1;
        let [(a1, b1), (a2, b2)] = self.unpack(params);
        let free = self.free();
        let both = free[0] && free[1];
        let tri = d * (d + 1) / 2;
        let mut g11 = vec![0.0; tri];
        let mut g12 = vec![0.0; tri];
        let mut g22 = vec![0.0; tri];
        let mut grad1 = vec![0.0; d];
        let mut grad2 = vec![0.0; d];
        let mut q = vec![0.0; d];
        q[0] = 1.0;
        let n = self.ds.n();
        let mut value = 0.0;
        for (i, x) in self.ds.features().rows().enumerate() {
            q[1..].copy_from_slice(x);
            let eta1 = a1 + b1.map_or(0.0, |b| dot(x, b));
            let eta2 = a2 + b2.map_or(0.0, |b| dot(x, b));
            let mx = eta1.max(eta2).max(0.0);
            let (e0, e1, e2) = ((-mx).exp(), (eta1 - mx).exp(), (eta2 - mx).exp());
            let s = e0 + e1 + e2;
            let (pr1, pr2) = (e1 / s, e2 / s);
            value -= mx + s.ln();
            let (y1, y2) = if i >= n {
                let w = self.omega[i - n];
                value += w * eta1 + (1.0 - w) * eta2;
                (w, 1.0 - w)
            } else {
                (0.0, 0.0)
            };
            let (r1, r2) = (y1 - pr1, y2 - pr2);
            let (w11, w12, w22) = (pr1 * (1.0 - pr1), pr1 * pr2, pr2 * (1.0 - pr2));
            for a in 0..d {
                grad1[a] += r1 * q[a];
                grad2[a] += r2 * q[a];
            }
            if hess.is_some() {
                // upper triangles stored row by row, each row a contiguous axpy
                let mut k = 0;
                for a in 0..d {
                    let tail = &q[a..];
                    let len = tail.len();
                    if both {
                        axpy(&mut g11[k..k + len], w11 * q[a], tail);
                        axpy(&mut g12[k..k + len], w12 * q[a], tail);
                        axpy(&mut g22[k..k + len], w22 * q[a], tail);
                    } else if free[0] {
                        axpy(&mut g11[k..k + len], w11 * q[a], tail);
                    } else {
                        axpy(&mut g22[k..k + len], w22 * q[a], tail);
                    }
                    k += len;
                }
            }
        }
        if !value.is_finite() {
            return None;
        }
        let (own, own_grad) = if free[0] {
            (&g11, &grad1)
        } else {
            (&g22, &grad2)
        };
        let mut k = 0;
        let Some(hess) = hess else {
            grad[..d].copy_from_slice(own_grad);
            if both {
                grad[d..].copy_from_slice(&grad2);
            }
            return Some(value);
        };
        for a in 0..d {
            for b in a..d {
                hess[(a, b)] = -own[k];
                hess[(b, a)] = -own[k];
                if both {
                    hess[(d + a, d + b)] = -g22[k];
                    hess[(d + b, d + a)] = -g22[k];
                    hess[(a, d + b)] = g12[k];
                    hess[(d + b, a)] = g12[k];
                    hess[(b, d + a)] = g12[k];
                    hess[(d + a, b)] = g12[k];
                }
                k += 1;
            }
        }
        grad[..d].copy_from_slice(own_grad);
        if both {
            grad[d..].copy_from_slice(&grad2);
        }
        Some(value)
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Evaluates the M-step objective
/// `-Σ_i log(1 + e^{α1*+x_i·β1} + e^{α2*+x_i·β2}) + Σ_j {ω_j(α1*+x_j·β1) + (1-ω_j)(α2*+x_j·β2)}`
/// with exact first and second derivatives.
pub fn q_objective(ds: &Dataset, omega: &[f64], params: &MultinomialParams) -> Result<QEval> {
    if omega.len() != ds.m() {
        return Err(Error::data("omega must have one entry per target row"));
    }
    if omega.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::domain("omega entries must lie in [0, 1]"));
    }
    if params.beta1.len() != ds.p() || params.beta2.len() != ds.p() {
        return Err(Error::data("parameter dimension does not match data"));
    }
    let x = params.to_vec();
    let problem = QProblem {
        ds,
        omega,
        frozen: [None, None],
    };
    let mut grad = vec![0.0; x.len()];
    let mut hess = Matrix::zeros(x.len(), x.len());
    let value = problem
        .evaluate(&x, &mut grad, &mut hess)
        .ok_or_else(|| Error::data("non-finite M-step objective"))?;
    Ok(QEval { value, grad, hess })
}
