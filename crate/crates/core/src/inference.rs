//! Empirical likelihood ratio inference.
//!
//! `R_N = 2{ℓ_N(θ̂) - ℓ_N(θ̃)}` compares nested fits: the SCAR test puts the
//! single-tilt model under the null, and the profile `R_N*(π)` fixes the
//! mixture proportion. Both are calibrated by chi-square limits. The
//! sandwich covariance of `(λ1, λ2, θ)` is built from numerical
//! derivatives of the per-observation terms of `h(λ, θ)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;

use crate::data::{Dataset, Theta};
use crate::error::{Error, Result};
use crate::estimation::{fit, fit_with_starts, FitOptions, FitResult, ModelKind, ModelSpec};
use crate::likelihood::{h_contributions, LagrangePair};
use crate::numerics::{chi2_quantile, chi2_sf, pivoted_qr_rank, solve_lu, KahanSum, Matrix};

/// Search domain for π in interval inversion.
pub const PI_DOMAIN: (f64, f64) = (1e-4, 1.0 - 1e-4);
const EXPAND_STEP: f64 = 0.01;
const CROSSING_TOL: f64 = 5e-4;
const BRACKET_WIDTH: f64 = 1e-9;
const MAX_REFINE: usize = 60;

/// Largest negative ELR value attributed to optimizer noise. EM stops on
/// a log-EL increment of `tol`, so two fits can each fall short of their
/// optimum by a multiple of it.
pub fn negative_elr_tolerance(opts: &FitOptions) -> f64 {
    1e-8 + 1e3 * opts.tol
}

fn with_context(e: Error, what: &str) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{what}: {m}")),
        Error::Feasibility(m) => Error::Feasibility(format!("{what}: {m}")),
        Error::Tie(m) => Error::Tie(format!("{what}: {m}")),
        Error::Rank(m) => Error::Rank(format!("{what}: {m}")),
        Error::NonConvergence {
            iterations,
            reason,
            last,
        } => Error::NonConvergence {
            iterations,
            reason: format!("{what}: {reason}"),
            last,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    /// Statistic before small negative values are clamped to zero.
    pub raw_statistic: f64,
    pub df: u32,
    pub p_value: f64,
    pub reject_at_0_05: bool,
    pub fit_full: FitResult,
    pub fit_null: FitResult,
}

fn clamp_statistic(raw: f64, opts: &FitOptions, what: &str) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -negative_elr_tolerance(opts) {
        Ok(0.0)
    } else {
        Err(Error::NonConvergence {
            iterations: 0,
            reason: format!(
                "{what}: restricted fit beats the full fit by {:.3e}",
                -raw / 2.0
            ),
            last: Vec::new(),
        })
    }
}

/// The restricted start embedded in the single-tilt model.
fn project_to_setm(theta: &Theta) -> Theta {
    Theta {
        alpha1: 0.0,
        beta1: vec![0.0; theta.p()],
        ..theta.clone()
    }
}

/// Tests the SCAR hypothesis `α1 = 0, β1 = 0` by the ELR of SETM vs DETM.
pub fn gof_test_scar(ds: &Dataset, opts: &FitOptions) -> Result<TestResult> {
    let full = fit(ds, &ModelSpec::detm(), opts).map_err(|e| with_context(e, "DETM fit"))?;
    gof_test_scar_from_fit(ds, full, opts)
}

/// [`gof_test_scar`] with the unrestricted DETM fit already computed.
pub fn gof_test_scar_from_fit(
    ds: &Dataset,
    full: FitResult,
    opts: &FitOptions,
) -> Result<TestResult> {
    if full.theta.p() != ds.p() {
        return Err(Error::data("DETM fit does not match the dataset dimension"));
    }
    let mut full = full;
    let null = fit_with_starts(
        ds,
        &ModelSpec::setm(),
        opts,
        &[project_to_setm(&full.theta)],
    )
    .map_err(|e| with_context(e, "SETM fit"))?;
    let mut raw = 2.0 * (full.profile_log_el - null.profile_log_el);
    if raw < 0.0 {
        // the single-tilt optimum is a DETM point; start the full fit there
        let again = fit_with_starts(
            ds,
            &ModelSpec::detm(),
            opts,
            core::slice::from_ref(&null.theta),
        )
        .map_err(|e| with_context(e, "DETM refit"))?;
        if again.profile_log_el > full.profile_log_el {
            full = again;
            raw = 2.0 * (full.profile_log_el - null.profile_log_el);
        }
    }
    let statistic = clamp_statistic(raw, opts, "SCAR test")?;
    let df = ds.p() as u32;
    let p_value = chi2_sf(statistic, df)?;
    Ok(TestResult {
        statistic,
        raw_statistic: raw,
        df,
        p_value,
        reject_at_0_05: p_value < 0.05,
        fit_full: full,
        fit_null: null,
    })
}

/// One end of a confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalBound {
    pub value: f64,
    /// `R_N*` at `value`.
    pub elr: f64,
    /// No crossing was found before the edge of the search domain.
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: IntervalBound,
    pub upper: IntervalBound,
    pub level: f64,
    /// Chi-square (1 df) quantile the profile is compared against.
    pub threshold: f64,
    pub pi_hat: f64,
    /// Every `(π, R_N*(π))` evaluated during the search, sorted by π.
    pub curve: Option<Vec<CurvePoint>>,
}

impl ConfidenceInterval {
    pub fn contains(&self, pi: f64) -> bool {
        self.lower.value <= pi && pi <= self.upper.value
    }

    pub fn is_open(&self) -> bool {
        self.lower.open || self.upper.open
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub pi: f64,
    pub elr: Result<f64>,
}

/// The profile `R_N*(π)` for one dataset, caching fixed-π fits so that
/// interval searches and curves reuse neighbouring solutions as starts.
#[derive(Debug, Clone)]
pub struct ProfileLikelihood<'a> {
    ds: &'a Dataset,
    kind: ModelKind,
    opts: FitOptions,
    full: FitResult,
    fixed: Vec<(f64, FitResult)>,
}

impl<'a> ProfileLikelihood<'a> {
    /// Fits the unrestricted model of `kind` and prepares the profile.
    pub fn new(ds: &'a Dataset, kind: ModelKind, opts: &FitOptions) -> Result<Self> {
        let spec = ModelSpec {
            kind,
            fixed_pi: None,
        };
        let full = fit(ds, &spec, opts).map_err(|e| with_context(e, "unrestricted fit"))?;
        Ok(Self::from_fit(ds, kind, opts, full))
    }

    /// Uses an existing unrestricted fit.
    pub fn from_fit(ds: &'a Dataset, kind: ModelKind, opts: &FitOptions, full: FitResult) -> Self {
        Self {
            ds,
            kind,
            opts: FitOptions {
                fixed_pi: None,
                ..opts.clone()
            },
            full,
            fixed: Vec::new(),
        }
    }

    pub fn full_fit(&self) -> &FitResult {
        &self.full
    }

    pub fn into_full_fit(self) -> FitResult {
        self.full
    }

    pub fn pi_hat(&self) -> f64 {
        self.full.theta.pi
    }

    fn nearest_start(&self, pi0: f64) -> Theta {
        let mut best = (self.full.theta.pi - pi0).abs();
        let mut theta = &self.full.theta;
        for (pi, fr) in &self.fixed {
            let d = (pi - pi0).abs();
            if d < best {
                best = d;
                theta = &fr.theta;
            }
        }
        Theta {
            pi: pi0,
            ..theta.clone()
        }
    }

    /// The fixed-π fit at `pi0`, computed on first use.
    pub fn fixed_fit(&mut self, pi0: f64) -> Result<&FitResult> {
        if !(pi0 > 0.0 && pi0 < 1.0) {
            return Err(Error::domain(format!("pi0 = {pi0} is outside (0, 1)")));
        }
        if let Some(k) = self.fixed.iter().position(|(p, _)| *p == pi0) {
            return Ok(&self.fixed[k].1);
        }
        let spec = ModelSpec {
            kind: self.kind,
            fixed_pi: Some(pi0),
        };
        let start = self.nearest_start(pi0);
        let fr = fit_with_starts(self.ds, &spec, &self.opts, &[start])
            .map_err(|e| with_context(e, &format!("fixed-pi fit at {pi0}")))?;
        if fr.profile_log_el > self.full.profile_log_el {
            self.improve_full(&fr.theta);
        }
        self.fixed.push((pi0, fr));
        Ok(&self.fixed.last().expect("just pushed").1)
    }

    /// Restarts the unrestricted fit from a better restricted solution.
    fn improve_full(&mut self, theta: &Theta) {
        let spec = ModelSpec {
            kind: self.kind,
            fixed_pi: None,
        };
        if let Ok(fr) = fit_with_starts(self.ds, &spec, &self.opts, core::slice::from_ref(theta)) {
            if fr.profile_log_el > self.full.profile_log_el {
                self.full = fr;
            }
        }
    }

    /// `R_N*(π0) = 2{ℓ_N(θ̂) - ℓ_N(θ̂_π0)}`, clamped at zero.
    pub fn elr(&mut self, pi0: f64) -> Result<f64> {
        let restricted = self.fixed_fit(pi0)?.profile_log_el;
        clamp_statistic(
            2.0 * (self.full.profile_log_el - restricted),
            &self.opts,
            "profile ELR",
        )
    }

    /// `R_N*` over a grid; failures are recorded per point.
    pub fn curve(&mut self, grid: &[f64]) -> Vec<CurvePoint> {
        grid.iter()
            .map(|&pi| CurvePoint {
                pi,
                elr: self.elr(pi),
            })
            .collect()
    }

    /// Inverts the profile ELR: `{π : R_N*(π) ≤ χ²₁(level)}`.
    ///
    /// Each side is bracketed by stepping 0.01 away from π̂, then the
    /// crossing is refined by the Illinois variant of false position on
    /// `sqrt(R_N*) - sqrt(q)`, which is close to linear in π.
    pub fn confidence_interval(
        &mut self,
        level: f64,
        record_curve: bool,
    ) -> Result<ConfidenceInterval> {
        if !(0.5..1.0).contains(&level) {
            return Err(Error::domain(format!(
                "level = {level} must lie in [0.5, 1)"
            )));
        }
        let threshold = chi2_quantile(level, 1)?;
        let lower = self.crossing(-1.0, threshold)?;
        let upper = self.crossing(1.0, threshold)?;
        let curve = record_curve.then(|| {
            let full_ll = self.full.profile_log_el;
            let mut pts: Vec<CurvePoint> = self
                .fixed
                .iter()
                .map(|(pi, fr)| CurvePoint {
                    pi: *pi,
                    elr: clamp_statistic(
                        2.0 * (full_ll - fr.profile_log_el),
                        &self.opts,
                        "profile ELR",
                    ),
                })
                .collect();
            pts.push(CurvePoint {
                pi: self.full.theta.pi,
                elr: Ok(0.0),
            });
            pts.sort_by(|a, b| a.pi.total_cmp(&b.pi));
            pts
        });
        Ok(ConfidenceInterval {
            lower,
            upper,
            level,
            threshold,
            pi_hat: self.pi_hat(),
            curve,
        })
    }

    fn crossing(&mut self, dir: f64, q: f64) -> Result<IntervalBound> {
        let (lo, hi) = PI_DOMAIN;
        let edge = if dir < 0.0 { lo } else { hi };
        let pi_hat = self.pi_hat();
        // π̂ may sit beyond the search domain (e.g. on the estimation clamp)
        if (dir < 0.0 && pi_hat <= lo) || (dir > 0.0 && pi_hat >= hi) {
            let elr = self.elr(edge)?;
            if elr <= q {
                return Ok(IntervalBound {
                    value: edge,
                    elr,
                    open: true,
                });
            }
            return Ok(IntervalBound {
                value: edge,
                elr,
                open: false,
            });
        }
        let (mut inside, mut inside_r) = (pi_hat, 0.0);
        let (outside, outside_r) = loop {
            let cand = (inside + dir * EXPAND_STEP).clamp(lo, hi);
            let r = self.elr(cand)?;
            if r > q {
                break (cand, r);
            }
            if cand == edge {
                return Ok(IntervalBound {
                    value: edge,
                    elr: r,
                    open: true,
                });
            }
            inside = cand;
            inside_r = r;
        };
        self.refine(q, (inside, inside_r), (outside, outside_r))
    }

    fn refine(&mut self, q: f64, inside: (f64, f64), outside: (f64, f64)) -> Result<IntervalBound> {
        let sq = q.sqrt();
        let (mut a, mut fa) = (inside.0, inside.1.sqrt() - sq);
        let (mut b, mut fb) = (outside.0, outside.1.sqrt() - sq);
        let mut best = if (inside.1 - q).abs() <= (outside.1 - q).abs() {
            inside
        } else {
            outside
        };
        let mut side = 0i8;
        for _ in 0..MAX_REFINE {
            if (best.1 - q).abs() <= CROSSING_TOL || (b - a).abs() <= BRACKET_WIDTH {
                break;
            }
            let mut c = (a * fb - b * fa) / (fb - fa);
            if !(c.is_finite()) || c <= a.min(b) || c >= a.max(b) {
                c = 0.5 * (a + b);
            }
            let r = self.elr(c)?;
            if (r - q).abs() < (best.1 - q).abs() {
                best = (c, r);
            }
            let fc = r.sqrt() - sq;
            if fc <= 0.0 {
                a = c;
                fa = fc;
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            } else {
                b = c;
                fb = fc;
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            }
        }
        Ok(IntervalBound {
            value: best.0,
            elr: best.1,
            open: false,
        })
    }
}

/// `R_N*(π0)` under the DETM.
pub fn elr_pi(ds: &Dataset, pi0: f64, opts: &FitOptions) -> Result<f64> {
    ProfileLikelihood::new(ds, ModelKind::Detm, opts)?.elr(pi0)
}

/// ELR confidence interval for π under the DETM.
pub fn ci_pi(ds: &Dataset, level: f64, opts: &FitOptions) -> Result<ConfidenceInterval> {
    ProfileLikelihood::new(ds, ModelKind::Detm, opts)?.confidence_interval(level, false)
}

/// `R_N*(π)` under the DETM over a grid of π values.
pub fn elr_curve(ds: &Dataset, grid: &[f64], opts: &FitOptions) -> Result<Vec<CurvePoint>> {
    if grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::domain("grid values must lie in (0, 1)"));
    }
    Ok(ProfileLikelihood::new(ds, ModelKind::Detm, opts)?.curve(grid))
}

/// Sandwich covariance of `υ = (λ1, λ2, α1, α2, β1, β2, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: Matrix,
    pub v_hat: Matrix,
    pub w_hat: Matrix,
    /// Finite-difference gradient of `h` at `υ̂`.
    pub gradient: Vec<f64>,
    pub method: CovarianceMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMethod {
    Numerical,
}

impl CovarianceEstimate {
    /// Position of π in `υ`.
    pub fn pi_index(&self) -> usize {
        self.sigma.nrows() - 1
    }

    /// Standard error of π̂ for a sample of total size `big_n`.
    pub fn pi_standard_error(&self, big_n: usize) -> f64 {
        let k = self.pi_index();
        (self.sigma[(k, k)].max(0.0) / big_n as f64).sqrt()
    }
}

fn pack(lam: &LagrangePair, t: &Theta) -> Vec<f64> {
    let mut v = vec![lam.lambda1, lam.lambda2, t.alpha1, t.alpha2];
    v.extend_from_slice(&t.beta1);
    v.extend_from_slice(&t.beta2);
    v.push(t.pi);
    v
}

fn unpack(v: &[f64], p: usize) -> (LagrangePair, Theta) {
    (
        LagrangePair::new(v[0], v[1]),
        Theta {
            alpha1: v[2],
            alpha2: v[3],
            beta1: v[4..4 + p].to_vec(),
            beta2: v[4 + p..4 + 2 * p].to_vec(),
            pi: v[4 + 2 * p],
        },
    )
}

fn contributions(ds: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    let (lam, theta) = unpack(v, ds.p());
    if !(theta.pi > 0.0 && theta.pi < 1.0) {
        return Err(Error::Feasibility("perturbed pi left (0, 1)".into()));
    }
    h_contributions(ds, &lam, &theta).ok_or_else(|| {
        Error::Feasibility("perturbation made a weight denominator non-positive".into())
    })
}

fn total(ds: &Dataset, v: &[f64]) -> Result<f64> {
    let mut s = KahanSum::default();
    for c in contributions(ds, v)? {
        s.add(c);
    }
    Ok(s.value())
}

/// Plug-in `Σ̂ = Ŵ⁻¹ V̂ Ŵ⁻¹` at a DETM fit.
///
/// `V̂` is the covariance of the per-observation score contributions of
/// `h`, centred within the source and within the target sample, and `Ŵ`
/// is `-N⁻¹` times the Hessian of `h`. Both use central differences with
/// step `1e-5 (1 + |υ_k|)`.
pub fn asymptotic_covariance(ds: &Dataset, fr: &FitResult) -> Result<CovarianceEstimate> {
    if fr.theta.p() != ds.p() || fr.el_weights.len() != ds.total() {
        return Err(Error::data("fit does not belong to this dataset"));
    }
    let upsilon = pack(&fr.lambda, &fr.theta);
    let k = upsilon.len();
    let big_n = ds.total();
    let steps: Vec<f64> = upsilon.iter().map(|u| 1e-5 * (1.0 + u.abs())).collect();

    // per-observation central differences
    let mut scores = Matrix::zeros(big_n, k);
    let mut gradient = vec![0.0; k];
    for j in 0..k {
        let mut up = upsilon.clone();
        let mut dn = upsilon.clone();
        up[j] += steps[j];
        dn[j] -= steps[j];
        let (cu, cd) = (contributions(ds, &up)?, contributions(ds, &dn)?);
        let mut g = KahanSum::default();
        for i in 0..big_n {
            let s = (cu[i] - cd[i]) / (2.0 * steps[j]);
            scores[(i, j)] = s;
            g.add(s);
        }
        gradient[j] = g.value();
    }
    let mut v_hat = Matrix::zeros(k, k);
    for range in [0..ds.n(), ds.n()..big_n] {
        let count = range.len() as f64;
        let mut mean = vec![0.0; k];
        for i in range.clone() {
            for (m, s) in mean.iter_mut().zip(scores.row(i)) {
                *m += s / count;
            }
        }
        for i in range {
            let row = scores.row(i);
            for a in 0..k {
                let da = row[a] - mean[a];
                for b in a..k {
                    v_hat[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            v_hat[(a, b)] /= big_n as f64;
            v_hat[(b, a)] = v_hat[(a, b)];
        }
    }

    let mut w_hat = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let eval = |sa: f64, sb: f64| {
                let mut v = upsilon.clone();
                v[a] += sa * steps[a];
                v[b] += sb * steps[b];
                total(ds, &v)
            };
            let second = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)?
                + eval(-1.0, -1.0)?)
                / (4.0 * steps[a] * steps[b]);
            w_hat[(a, b)] = -second / big_n as f64;
            w_hat[(b, a)] = w_hat[(a, b)];
        }
    }

    let rank = pivoted_qr_rank(&w_hat, 1e-10);
    if rank < k {
        return Err(Error::Rank(format!(
            "W has rank {rank} < {k}; the covariance is not identified at this fit"
        )));
    }
    let inv_v = solve_columns(&w_hat, &v_hat)?;
    let sigma_t = solve_columns(&w_hat, &inv_v.transpose())?;
    let mut sigma = sigma_t.transpose();
    sigma.symmetrize();
    Ok(CovarianceEstimate {
        sigma,
        v_hat,
        w_hat,
        gradient,
        method: CovarianceMethod::Numerical,
    })
}

/// `A⁻¹ B` column by column.
fn solve_columns(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let k = a.nrows();
    let mut out = Matrix::zeros(k, b.ncols());
    for j in 0..b.ncols() {
        let col: Vec<f64> = (0..k).map(|i| b[(i, j)]).collect();
        let x = solve_lu(a, &col, 1e-14).map_err(|e| match e {
            Error::Singular { pivot } => Error::Rank(format!("W is singular at pivot {pivot}")),
            other => other,
        })?;
        for i in 0..k {
            out[(i, j)] = x[i];
        }
    }
    Ok(out)
}

impl core::fmt::Display for CurvePoint {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match &self.elr {
            Ok(v) => write!(f, "{},{}", self.pi, v),
            Err(e) => write!(f, "{},NaN ({})", self.pi, e),
        }
    }
}
