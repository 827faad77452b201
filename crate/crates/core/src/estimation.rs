//! The EM algorithm for the maximum empirical likelihood estimator.
//!
//! Each iteration computes posterior class probabilities for the target
//! rows (E-step), then updates π by their average and the tilt parameters
//! by a weighted three-class multinomial logistic regression on the pooled
//! rows (M-step). The log-EL never decreases along the iterations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{validate_dataset, Dataset, Theta};
use crate::error::{Error, Result};
use crate::likelihood::{self, LagrangePair, MultinomialParams, QProblem};
use crate::numerics::{
    damped_newton, damped_newton_reusing, dot, sigmoid, KahanSum, Matrix, NewtonOptions, Objective,
};

/// Bounds applied to π after the averaging step.
pub const PI_CLAMP: f64 = 1e-6;
const WEIGHT_FLOOR: f64 = 1e-300;
const TIE_TOL: f64 = 1e-9;
const EMPTY_CLASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Detm,
    /// Source and target positives share one distribution (α1 = 0, β1 = 0).
    Setm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub fixed_pi: Option<f64>,
}

impl ModelSpec {
    pub fn detm() -> Self {
        Self::default()
    }

    pub fn setm() -> Self {
        Self {
            kind: ModelKind::Setm,
            fixed_pi: None,
        }
    }

    pub fn with_fixed_pi(self, pi: f64) -> Self {
        Self {
            fixed_pi: Some(pi),
            ..self
        }
    }

    pub fn fitted_model(&self) -> FittedModel {
        match (self.kind, self.fixed_pi.is_some()) {
            (ModelKind::Detm, false) => FittedModel::Detm,
            (ModelKind::Setm, false) => FittedModel::Setm,
            (ModelKind::Detm, true) => FittedModel::DetmFixedPi,
            (ModelKind::Setm, true) => FittedModel::SetmFixedPi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FittedModel {
    Detm,
    Setm,
    DetmFixedPi,
    SetmFixedPi,
}

impl FittedModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Detm => "detm",
            Self::Setm => "setm",
            Self::DetmFixedPi => "detm_fixed_pi",
            Self::SetmFixedPi => "setm_fixed_pi",
        }
    }
}

impl fmt::Display for FittedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the two target components are oriented after fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelRule {
    /// Component 1 has proportion below one half.
    PiLessHalf,
    /// Component 1 is the one closer to the source positives in plug-in
    /// Kullback-Leibler divergence.
    #[default]
    KlRule,
    None,
}

impl LabelRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PiLessHalf => "pi_less_half",
            Self::KlRule => "kl_rule",
            Self::None => "none",
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pi_less_half" => Ok(Self::PiLessHalf),
            "kl_rule" => Ok(Self::KlRule),
            "none" => Ok(Self::None),
            other => Err(Error::config(format!(
                "unknown label rule '{other}' (expected pi_less_half, kl_rule or none)"
            ))),
        }
    }
}

/// Outcome of label-switch resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSwitch {
    /// The rule was not applied (rule `none`, or a SETM fit).
    NotApplied,
    /// The fitted orientation already satisfied the rule.
    Kept,
    /// Components were exchanged to satisfy the rule.
    Switched,
    /// Fixed-π fit where no start ended in an orientation satisfying the rule.
    Unresolved,
}

impl LabelSwitch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NotApplied => "not_applied",
            Self::Kept => "kept",
            Self::Switched => "switched",
            Self::Unresolved => "unresolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Stop when the log-EL increases by at most this much.
    pub tol: f64,
    /// Also stop when no parameter moves by more than this.
    pub param_tol: f64,
    pub max_em_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    pub label_rule: LabelRule,
    pub fixed_pi: Option<f64>,
    /// Squared extrapolation between EM steps. Proposals are kept only when
    /// they do not lower the log-EL, so the trace stays monotone.
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            param_tol: 1e-8,
            max_em_iter: 2000,
            n_starts: 10,
            seed: 0,
            label_rule: LabelRule::KlRule,
            fixed_pi: None,
            accelerate: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.param_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if self.n_starts == 0 || self.max_em_iter == 0 {
            return Err(Error::config("n_starts and max_em_iter must be at least 1"));
        }
        if let Some(pi) = self.fixed_pi {
            check_fixed_pi(pi)?;
        }
        Ok(())
    }
}

/// Largest spread of `α_t + x·β_t` over the pooled sample accepted as an
/// interior solution.
pub const DEGENERATE_SPREAD: f64 = 100.0;

/// True when either tilt of `theta` spreads beyond [`DEGENERATE_SPREAD`]
/// over the rows of `ds`. Happens when part of the target sample is
/// linearly separable from the source sample.
pub fn is_degenerate(ds: &Dataset, theta: &Theta) -> bool {
    let eta = likelihood::tilts(ds, theta);
    (0..2).any(|t| {
        let (lo, hi) = eta
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e[t]), hi.max(e[t]))
            });
        !(hi - lo <= DEGENERATE_SPREAD)
    })
}

fn check_fixed_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("fixed pi = {pi} is outside (0, 1)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    pub lambda: LagrangePair,
    pub el_weights: Vec<f64>,
    /// `ℓ_N(θ̂)`, the log-EL with the weights profiled out.
    pub profile_log_el: f64,
    /// `ℓ_EL` at the final weights; `profile_log_el - N log N` at convergence.
    pub log_el: f64,
    pub model: FittedModel,
    /// Log-EL after each M-step of the selected start.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    pub label_rule: LabelRule,
    pub label_switch: LabelSwitch,
    /// π ended on its clamp.
    pub boundary: bool,
    /// A tilt spans more than [`DEGENERATE_SPREAD`] in log density ratio
    /// over the pooled sample: the log-EL is climbing towards a supremum at
    /// infinity rather than an interior maximum.
    pub degenerate: bool,
    pub start_index: usize,
    pub failed_starts: usize,
}

impl FitResult {
    /// The same fit with the components exchanged.
    fn switched(&self) -> Self {
        Self {
            theta: self.theta.switched(),
            lambda: self.lambda.swapped(),
            ..self.clone()
        }
    }
}

/// Posterior probabilities that each target row belongs to component 1.
pub fn e_step(ds: &Dataset, theta: &Theta) -> Result<Vec<f64>> {
    theta.validate()?;
    if theta.p() != ds.p() {
        return Err(Error::data("theta dimension does not match data"));
    }
    let prior = theta.pi.ln() - (1.0 - theta.pi).ln();
    Ok(ds
        .target_rows()
        .map(|x| sigmoid(prior + theta.log_ratio1(x) - theta.log_ratio2(x)))
        .collect())
}

fn check_omega(ds: &Dataset, omega: &[f64]) -> Result<()> {
    if omega.len() != ds.m() {
        return Err(Error::data("omega must have one entry per target row"));
    }
    if omega.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::domain("omega entries must lie in [0, 1]"));
    }
    Ok(())
}

fn m_step_newton() -> NewtonOptions {
    NewtonOptions {
        grad_tol: 1e-9,
        ..NewtonOptions::default()
    }
}

/// Maximizes the weighted multinomial objective from zero.
pub fn fit_weighted_multinomial(ds: &Dataset, omega: &[f64]) -> Result<MultinomialParams> {
    check_omega(ds, omega)?;
    let (s1, s2) = class_totals(omega);
    let n = ds.n() as f64;
    let problem = QProblem {
        ds,
        omega,
        frozen: [frozen_value(s1, n), frozen_value(s2, n)],
    };
    let sol = damped_newton(&problem, vec![0.0; problem.dim()], &m_step_newton())?;
    Ok(params_from(&problem, &sol.x))
}

/// Parameters and weights produced by one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub theta: Theta,
    pub weights: Vec<f64>,
}

/// One M-step: π by averaging, tilts by the weighted multinomial fit,
/// intercepts shifted back, then the point masses.
pub fn m_step(ds: &Dataset, omega: &[f64], spec: &ModelSpec) -> Result<MStep> {
    check_omega(ds, omega)?;
    if let Some(pi) = spec.fixed_pi {
        check_fixed_pi(pi)?;
    }
    let full = m_step_from(ds, omega, spec, None, &mut None)?;
    Ok(MStep {
        theta: full.theta,
        weights: full.log_weights.iter().map(|lp| lp.exp()).collect(),
    })
}

fn class_totals(omega: &[f64]) -> (f64, f64) {
    let mut s1 = KahanSum::default();
    let mut s2 = KahanSum::default();
    for &w in omega {
        s1.add(w);
        s2.add(1.0 - w);
    }
    (s1.value().max(WEIGHT_FLOOR), s2.value().max(WEIGHT_FLOOR))
}

/// A class with (numerically) no target weight has its shifted intercept
/// pinned at `log(s/n)` and zero slope; its optimum is otherwise at -∞.
fn frozen_value(total: f64, n: f64) -> Option<f64> {
    (total <= EMPTY_CLASS).then(|| (total / n).ln())
}

fn params_from(problem: &QProblem<'_>, x: &[f64]) -> MultinomialParams {
    let p = problem.ds.p();
    let [(a1, b1), (a2, b2)] = problem.unpack(x);
    MultinomialParams {
        alpha1s: a1,
        alpha2s: a2,
        beta1: b1.map_or_else(|| vec![0.0; p], <[f64]>::to_vec),
        beta2: b2.map_or_else(|| vec![0.0; p], <[f64]>::to_vec),
    }
}

/// M-step output with log-weights kept alongside.
struct MStepFull {
    theta: Theta,
    log_weights: Vec<f64>,
}

fn m_step_from(
    ds: &Dataset,
    omega: &[f64],
    spec: &ModelSpec,
    warm: Option<&Theta>,
    hess_cache: &mut Option<Matrix>,
) -> Result<MStepFull> {
    let n = ds.n() as f64;
    let pi = match spec.fixed_pi {
        Some(pi) => pi,
        None => {
            let mean = omega.iter().sum::<f64>() / omega.len() as f64;
            mean.clamp(PI_CLAMP, 1.0 - PI_CLAMP)
        }
    };
    let (s1, s2) = class_totals(omega);
    let shift = [(s1 / n).ln(), (s2 / n).ln()];
    let mut frozen = [frozen_value(s1, n), frozen_value(s2, n)];
    if spec.kind == ModelKind::Setm {
        frozen[0] = Some(shift[0]);
    }
    let problem = QProblem { ds, omega, frozen };
    let x0 = match warm {
        Some(t) => {
            let mut v = Vec::with_capacity(problem.dim());
            for (k, (alpha, beta)) in [(t.alpha1, &t.beta1), (t.alpha2, &t.beta2)]
                .into_iter()
                .enumerate()
            {
                if frozen[k].is_none() {
                    v.push(alpha + shift[k]);
                    v.extend_from_slice(beta);
                }
            }
            v
        }
        None => vec![0.0; problem.dim()],
    };
    // with every class frozen there is nothing left to optimize
    let x = if problem.dim() == 0 {
        x0
    } else {
        damped_newton_reusing(&problem, x0, &m_step_newton(), hess_cache)?.x
    };
    let params = params_from(&problem, &x);
    let alpha1 = match spec.kind {
        ModelKind::Detm => params.alpha1s - shift[0],
        ModelKind::Setm => 0.0,
    };
    let theta = Theta {
        alpha1,
        alpha2: params.alpha2s - shift[1],
        beta1: params.beta1.clone(),
        beta2: params.beta2.clone(),
        pi,
    };
    let log_n = n.ln();
    let log_weights = ds
        .features()
        .rows()
        .map(|x| {
            let e1 = params.alpha1s + dot(x, &params.beta1);
            let e2 = params.alpha2s + dot(x, &params.beta2);
            let mx = e1.max(e2).max(0.0);
            -log_n - mx - ((-mx).exp() + (e1 - mx).exp() + (e2 - mx).exp()).ln()
        })
        .collect();
    Ok(MStepFull { theta, log_weights })
}

/// Penalized logistic regression of target-vs-source membership.
struct MembershipLogistic<'a> {
    ds: &'a Dataset,
    ridge: f64,
}

impl Objective for MembershipLogistic<'_> {
    fn dim(&self) -> usize {
        self.ds.p() + 1
    }

    fn evaluate(&self, w: &[f64], grad: &mut [f64], hess: &mut Matrix) -> Option<f64> {
        let d = self.dim();
        grad.fill(0.0);
        for v in hess.as_mut_slice() {
            *v = 0.0;
        }
        let mut value = 0.0;
        let mut q = vec![1.0; d];
        for (i, x) in self.ds.features().rows().enumerate() {
            q[1..].copy_from_slice(x);
            let z = w[0] + dot(x, &w[1..]);
            let y = if self.ds.is_source(i) { 0.0 } else { 1.0 };
            // log σ(z) = -log(1 + e^{-z})
            let log1pexp = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            value += y * z - log1pexp;
            let s = sigmoid(z);
            let r = y - s;
            let wt = s * (1.0 - s);
            for a in 0..d {
                grad[a] += r * q[a];
                for b in a..d {
                    hess[(a, b)] -= wt * q[a] * q[b];
                }
            }
        }
        for a in 1..d {
            value -= 0.5 * self.ridge * w[a] * w[a];
            grad[a] -= self.ridge * w[a];
            hess[(a, a)] -= self.ridge;
        }
        for a in 0..d {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        Some(value)
    }
}

/// Deterministic first start: both components at the source except that
/// component 2 takes the target-vs-source density ratio from a lightly
/// penalized logistic regression.
fn logistic_start(ds: &Dataset, pi: f64) -> Theta {
    let f = MembershipLogistic {
        ds,
        ridge: 1e-4 * ds.total() as f64,
    };
    let (alpha2, beta2) = match damped_newton(&f, vec![0.0; f.dim()], &NewtonOptions::default()) {
        Ok(sol) => (
            sol.x[0] - (ds.m() as f64 / ds.n() as f64).ln(),
            sol.x[1..].to_vec(),
        ),
        Err(_) => (0.0, vec![0.0; ds.p()]),
    };
    Theta {
        alpha1: 0.0,
        alpha2,
        beta1: vec![0.0; ds.p()],
        beta2,
        pi,
    }
}

fn default_starts(ds: &Dataset, spec: &ModelSpec, opts: &FitOptions, count: usize) -> Vec<Theta> {
    if count == 0 {
        return Vec::new();
    }
    let first = logistic_start(ds, spec.fixed_pi.unwrap_or(0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let mut starts = vec![first.clone()];
    while starts.len() < count {
        let mut t = first.clone();
        if spec.kind == ModelKind::Detm {
            for b in &mut t.beta1 {
                *b += noise.sample(&mut rng);
            }
        }
        for b in &mut t.beta2 {
            *b += noise.sample(&mut rng);
        }
        let pi = rng.random_range(0.1..0.9);
        t.pi = spec.fixed_pi.unwrap_or(pi);
        starts.push(t);
    }
    starts
}

/// Makes a user-supplied start conform to the model.
fn conform_start(start: &Theta, spec: &ModelSpec) -> Theta {
    let mut t = start.clone();
    if spec.kind == ModelKind::Setm {
        t.alpha1 = 0.0;
        t.beta1.iter_mut().for_each(|b| *b = 0.0);
    }
    if let Some(pi) = spec.fixed_pi {
        t.pi = pi;
    }
    t.pi = t.pi.clamp(PI_CLAMP, 1.0 - PI_CLAMP);
    t
}

struct Run {
    theta: Theta,
    weights: Vec<f64>,
    omega: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// One EM update and the log-EL it reaches.
struct EmStep {
    theta: Theta,
    log_weights: Vec<f64>,
    omega: Vec<f64>,
    log_el: f64,
}

fn em_update(
    ds: &Dataset,
    spec: &ModelSpec,
    theta: &Theta,
    warm: Option<&Theta>,
    hess_cache: &mut Option<Matrix>,
) -> Result<EmStep> {
    let omega = e_step(ds, theta)?;
    let step = m_step_from(ds, &omega, spec, warm, hess_cache)?;
    let log_el = likelihood::log_el_from_log_weights(ds, &step.theta, &step.log_weights);
    if !log_el.is_finite() {
        return Err(Error::NonConvergence {
            iterations: 0,
            reason: "log-EL became non-finite".into(),
            last: theta_vec(&step.theta),
        });
    }
    Ok(EmStep {
        theta: step.theta,
        log_weights: step.log_weights,
        omega,
        log_el,
    })
}

/// Coordinates used for extrapolation: intercepts, slopes and logit π.
fn extrapolation_coords(t: &Theta) -> Vec<f64> {
    let mut v = vec![t.alpha1, t.alpha2];
    v.extend_from_slice(&t.beta1);
    v.extend_from_slice(&t.beta2);
    v.push(t.pi.ln() - (1.0 - t.pi).ln());
    v
}

fn from_extrapolation_coords(v: &[f64], p: usize) -> Option<Theta> {
    let pi = sigmoid(v[2 * p + 2]).clamp(PI_CLAMP, 1.0 - PI_CLAMP);
    let t = Theta {
        alpha1: v[0],
        alpha2: v[1],
        beta1: v[2..2 + p].to_vec(),
        beta2: v[2 + p..2 + 2 * p].to_vec(),
        pi,
    };
    t.validate().ok().map(|_| t)
}

/// Squared-extrapolation proposal from three successive EM iterates.
fn squarem_proposal(t0: &Theta, t1: &Theta, t2: &Theta, spec: &ModelSpec) -> Option<Theta> {
    let (x0, x1, x2) = (
        extrapolation_coords(t0),
        extrapolation_coords(t1),
        extrapolation_coords(t2),
    );
    let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = x2
        .iter()
        .zip(&x1)
        .zip(&r)
        .map(|((a, b), c)| a - b - c)
        .collect();
    let (rn, vn) = (dot(&r, &r).sqrt(), dot(&v, &v).sqrt());
    if !(vn > 0.0) || !rn.is_finite() {
        return None;
    }
    let a = (-rn / vn).min(-1.0);
    let x: Vec<f64> = x0
        .iter()
        .zip(&r)
        .zip(&v)
        .map(|((x, r), v)| x - 2.0 * a * r + a * a * v)
        .collect();
    let mut t = from_extrapolation_coords(&x, t0.p())?;
    if spec.kind == ModelKind::Setm {
        t.alpha1 = 0.0;
        t.beta1.iter_mut().for_each(|b| *b = 0.0);
    }
    if let Some(pi) = spec.fixed_pi {
        t.pi = pi;
    }
    Some(t)
}

struct Tracker<'a> {
    opts: &'a FitOptions,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl Tracker<'_> {
    /// Records an accepted iterate; returns true when the run should stop.
    fn record(&mut self, from: &Theta, step: &EmStep) -> bool {
        let increment = self.trace.last().map(|prev| step.log_el - prev);
        self.trace.push(step.log_el);
        if let Some(inc) = increment {
            if inc <= self.opts.tol || step.theta.max_abs_diff(from) <= self.opts.param_tol {
                self.converged = true;
            }
        }
        self.converged || self.iterations >= self.opts.max_em_iter
    }
}

/// Parameter magnitude past which a failed run is reported as diverging.
const DIVERGENCE_HINT: f64 = 50.0;

fn run_em(ds: &Dataset, spec: &ModelSpec, opts: &FitOptions, start: Theta) -> Result<Run> {
    let mut tracker = Tracker {
        opts,
        trace: Vec::new(),
        iterations: 0,
        converged: false,
    };
    // the M-step curvature changes slowly along the iterations
    let mut hess_cache: Option<Matrix> = None;
    let mut step = |tracker: &mut Tracker<'_>, theta: &Theta, warm: bool| {
        tracker.iterations += 1;
        em_update(ds, spec, theta, warm.then_some(theta), &mut hess_cache).map_err(|e| match e {
            Error::NonConvergence { reason, last, .. } => Error::NonConvergence {
                iterations: tracker.iterations,
                reason: if last.iter().any(|v| v.abs() > DIVERGENCE_HINT) {
                    format!("{reason}; a tilt is diverging, as happens when part of the target sample is linearly separable from the source sample")
                } else {
                    reason
                },
                last,
            },
            other => other,
        })
    };
    let mut current = step(&mut tracker, &start, false)?;
    if !tracker.record(&start, &current) {
        loop {
            let t0 = current.theta.clone();
            // once a tilt runs away the M-step may stall short of its
            // gradient tolerance; the run then ends unconverged
            let stalled = |e: &Error, at: &Theta| {
                matches!(e, Error::NonConvergence { .. }) && is_degenerate(ds, at)
            };
            let s1 = match step(&mut tracker, &t0, true) {
                Ok(s) => s,
                Err(e) if stalled(&e, &t0) => break,
                Err(e) => return Err(e),
            };
            // an EM step cannot lose log-EL in exact arithmetic; a loss is
            // rounding, so the previous iterate is already stationary
            if s1.log_el < current.log_el {
                tracker.converged = true;
                break;
            }
            if tracker.record(&t0, &s1) {
                current = s1;
                break;
            }
            let s2 = match step(&mut tracker, &s1.theta, true) {
                Ok(s) => s,
                Err(e) if stalled(&e, &s1.theta) => {
                    current = s1;
                    break;
                }
                Err(e) => return Err(e),
            };
            if s2.log_el < s1.log_el {
                tracker.converged = true;
                current = s1;
                break;
            }
            let stop = tracker.record(&s1.theta, &s2);
            current = s2;
            if stop {
                break;
            }
            if !opts.accelerate {
                continue;
            }
            let Some(proposal) = squarem_proposal(&t0, &s1.theta, &current.theta, spec) else {
                continue;
            };
            // the proposal is kept only if the EM step from it does not lose
            // log-EL, so the recorded trace stays monotone
            if let Ok(s3) = step(&mut tracker, &proposal, true) {
                if s3.log_el >= current.log_el {
                    let from = current.theta.clone();
                    current = s3;
                    if tracker.record(&from, &current) {
                        break;
                    }
                } else if tracker.iterations >= opts.max_em_iter {
                    break;
                }
            }
        }
    }
    Ok(Run {
        weights: current.log_weights.iter().map(|lp| lp.exp()).collect(),
        theta: current.theta,
        omega: current.omega,
        trace: tracker.trace,
        converged: tracker.converged,
        iterations: tracker.iterations,
    })
}

fn theta_vec(t: &Theta) -> Vec<f64> {
    let mut v = vec![t.alpha1, t.alpha2];
    v.extend_from_slice(&t.beta1);
    v.extend_from_slice(&t.beta2);
    v.push(t.pi);
    v
}

/// Plug-in divergences `(KL1, KL2)` with `KL_t = -Σ_i p_i (α_t + x_i·β_t)`.
fn plug_in_kl(ds: &Dataset, theta: &Theta, weights: &[f64]) -> (f64, f64) {
    let mut k1 = KahanSum::default();
    let mut k2 = KahanSum::default();
    for (x, &p) in ds.features().rows().zip(weights) {
        k1.add(-p * theta.log_ratio1(x));
        k2.add(-p * theta.log_ratio2(x));
    }
    (k1.value(), k2.value())
}

fn kl_compliant(ds: &Dataset, run: &Run) -> bool {
    let (k1, k2) = plug_in_kl(ds, &run.theta, &run.weights);
    k1 <= k2
}

/// Fits the model by EM from the default starts.
pub fn fit(ds: &Dataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    fit_with_starts(ds, spec, opts, &[])
}

/// Fits the model by EM, trying `warm` starts before the default ones.
///
/// The total number of starts is `max(opts.n_starts, warm.len())`. The
/// start with the highest final log-EL wins; near-ties go to the earliest.
pub fn fit_with_starts(
    ds: &Dataset,
    spec: &ModelSpec,
    opts: &FitOptions,
    warm: &[Theta],
) -> Result<FitResult> {
    opts.validate()?;
    let spec = resolve_spec(spec, opts)?;
    validate_dataset(ds)?.require_full_rank()?;
    for t in warm {
        t.validate()?;
        if t.p() != ds.p() {
            return Err(Error::data("warm start dimension does not match data"));
        }
    }
    let mut starts: Vec<Theta> = warm.iter().map(|t| conform_start(t, &spec)).collect();
    let extra = opts.n_starts.saturating_sub(starts.len());
    starts.extend(
        default_starts(ds, &spec, opts, extra)
            .iter()
            .map(|t| conform_start(t, &spec)),
    );

    let mut runs: Vec<(usize, Run)> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for (k, start) in starts.into_iter().enumerate() {
        match run_em(ds, &spec, opts, start) {
            Ok(run) => runs.push((k, run)),
            Err(e) => failures.push(format!("start {k}: {e}")),
        }
    }
    if runs.is_empty() {
        return Err(Error::NonConvergence {
            iterations: 0,
            reason: format!("all starts failed: {}", failures.join("; ")),
            last: Vec::new(),
        });
    }
    let failed_starts = failures.len();

    // fixed-π fits cannot be reoriented afterwards, so under the KL rule
    // prefer starts that already end in the canonical orientation
    let restrict = spec.kind == ModelKind::Detm
        && spec.fixed_pi.is_some()
        && opts.label_rule == LabelRule::KlRule;
    let compliant: Vec<bool> = runs
        .iter()
        .map(|(_, r)| !restrict || kl_compliant(ds, r))
        .collect();
    let any_compliant = compliant.iter().any(|&c| c);
    let mut best: Option<usize> = None;
    for (idx, (_, run)) in runs.iter().enumerate() {
        if any_compliant && !compliant[idx] {
            continue;
        }
        let ll = *run.trace.last().expect("at least one iteration");
        let better = match best {
            None => true,
            Some(b) => ll > *runs[b].1.trace.last().expect("non-empty") + TIE_TOL,
        };
        if better {
            best = Some(idx);
        }
    }
    let (start_index, run) = runs.swap_remove(best.expect("a best start exists"));
    let result = finish(ds, &spec, opts, start_index, run, failed_starts);
    let mut result = result?;
    if restrict {
        result.label_switch = if any_compliant {
            LabelSwitch::Kept
        } else {
            LabelSwitch::Unresolved
        };
        return Ok(result);
    }
    if spec.kind == ModelKind::Detm && spec.fixed_pi.is_none() {
        return resolve_label_switch(&result, ds, opts.label_rule);
    }
    Ok(result)
}

fn resolve_spec(spec: &ModelSpec, opts: &FitOptions) -> Result<ModelSpec> {
    let fixed_pi = match (spec.fixed_pi, opts.fixed_pi) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::config(
                "conflicting fixed pi values in model spec and options",
            ));
        }
        (a, b) => a.or(b),
    };
    if let Some(pi) = fixed_pi {
        check_fixed_pi(pi)?;
    }
    Ok(ModelSpec {
        kind: spec.kind,
        fixed_pi,
    })
}

fn finish(
    ds: &Dataset,
    spec: &ModelSpec,
    opts: &FitOptions,
    start_index: usize,
    run: Run,
    failed_starts: usize,
) -> Result<FitResult> {
    let big_n = ds.total() as f64;
    let log_el = *run.trace.last().expect("at least one iteration");
    let (s1, s2) = class_totals(&run.omega);
    let implied = LagrangePair {
        lambda1: s1 / big_n,
        lambda2: s2 / big_n,
        degenerate: false,
    };
    // the EM weights carry the multipliers implicitly; the profile solve is
    // preferred when it succeeds since it is exact at θ̂
    let (profile_log_el, lambda) = match likelihood::profile(ds, &run.theta) {
        Ok(pv) => (pv.value.max(log_el + big_n * big_n.ln()), pv.lambda),
        Err(_) => (log_el + big_n * big_n.ln(), implied),
    };
    let boundary =
        spec.fixed_pi.is_none() && (run.theta.pi <= PI_CLAMP || run.theta.pi >= 1.0 - PI_CLAMP);
    let degenerate = is_degenerate(ds, &run.theta);
    Ok(FitResult {
        theta: run.theta,
        lambda,
        el_weights: run.weights,
        profile_log_el,
        log_el,
        model: spec.fitted_model(),
        trace: run.trace,
        converged: run.converged,
        n_iterations: run.iterations,
        label_rule: opts.label_rule,
        label_switch: LabelSwitch::NotApplied,
        boundary,
        degenerate,
        start_index,
        failed_starts,
    })
}

/// Orients a DETM fit according to `rule`. Both orientations have the
/// same profile log-EL; SETM and fixed-π fits are returned unchanged.
pub fn resolve_label_switch(fr: &FitResult, ds: &Dataset, rule: LabelRule) -> Result<FitResult> {
    if fr.model != FittedModel::Detm || rule == LabelRule::None {
        let mut out = fr.clone();
        out.label_rule = rule;
        if fr.model != FittedModel::Detm {
            return Ok(fr.clone());
        }
        out.label_switch = LabelSwitch::NotApplied;
        return Ok(out);
    }
    let switch = match rule {
        LabelRule::PiLessHalf => {
            if fr.theta.pi == 0.5 {
                return Err(Error::Tie(
                    "estimated pi is exactly 0.5; use the kl_rule label rule".into(),
                ));
            }
            fr.theta.pi > 0.5
        }
        LabelRule::KlRule => {
            let (k1, k2) = plug_in_kl(ds, &fr.theta, &fr.el_weights);
            k1 > k2
        }
        LabelRule::None => unreachable!(),
    };
    let mut out = if switch { fr.switched() } else { fr.clone() };
    out.label_rule = rule;
    // re-resolving an already switched fit keeps reporting the switch
    out.label_switch = match (switch, fr.label_switch) {
        (true, LabelSwitch::Switched) => LabelSwitch::Kept,
        (true, _) => LabelSwitch::Switched,
        (false, LabelSwitch::Switched) => LabelSwitch::Switched,
        (false, _) => LabelSwitch::Kept,
    };
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;
    use crate::likelihood::{el_weights, profile_log_el, q_objective, solve_lagrange};

    fn quick() -> FitOptions {
        FitOptions {
            n_starts: 3,
            ..FitOptions::default()
        }
    }

    #[test]
    fn setm_m_step_with_every_class_frozen() {
        let ds = pu_data(9, 20, 20, 0.5, &[0.0, 0.0], &[1.0, 1.0]);
        let spec = ModelSpec {
            kind: ModelKind::Setm,
            fixed_pi: Some(0.9),
        };
        let ms = m_step(&ds, &[1.0; 20], &spec).unwrap();
        assert_eq!(ms.theta.alpha1, 0.0);
        assert!((ms.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_means_a_wide_tilt() {
        let ds = pu_data(8, 40, 40, 0.5, &[0.0], &[1.0]);
        assert!(!is_degenerate(&ds, &Theta::null(1, 0.5)));
        let moderate = Theta::new(-0.5, -1.0, vec![0.5], vec![2.0], 0.5).unwrap();
        assert!(!is_degenerate(&ds, &moderate));
        let runaway = Theta::new(-0.5, -900.0, vec![0.5], vec![400.0], 0.5).unwrap();
        assert!(is_degenerate(&ds, &runaway));
        assert!(is_degenerate(&ds, &runaway.switched()));
    }

    #[test]
    fn e_step_examples() {
        let ds = pu_data(1, 5, 6, 0.5, &[0.0], &[1.0]);
        let t = Theta::new(0.3, 0.3, vec![0.2], vec![0.2], 0.35).unwrap();
        assert!(e_step(&ds, &t)
            .unwrap()
            .iter()
            .all(|w| (w - 0.35).abs() < 1e-15));
        let t = Theta::new(0.0, 2f64.ln(), vec![0.0], vec![0.0], 0.5).unwrap();
        assert!(e_step(&ds, &t)
            .unwrap()
            .iter()
            .all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let t = Theta::new(-0.4, 0.2, vec![1.5], vec![-0.5], 0.3).unwrap();
        let a = e_step(&ds, &t).unwrap();
        let b = e_step(&ds, &t.switched()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn m_step_constant_omega_and_constraints() {
        let ds = pu_data(2, 40, 60, 0.6, &[0.5, 0.0], &[1.0, 1.0]);
        let omega = vec![0.37; 60];
        let st = m_step(&ds, &omega, &ModelSpec::detm()).unwrap();
        assert!((st.theta.pi - 0.37).abs() < 1e-15);
        assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        for t in 0..2 {
            let s: f64 = ds
                .features()
                .rows()
                .zip(&st.weights)
                .map(|(x, p)| {
                    p * if t == 0 {
                        st.theta.log_ratio1(x)
                    } else {
                        st.theta.log_ratio2(x)
                    }
                    .exp()
                })
                .sum();
            assert!((s - 1.0).abs() < 1e-6, "constraint {t}: {s}");
        }
    }

    #[test]
    fn m_step_setm_freezes_component_one() {
        let ds = pu_data(3, 40, 60, 0.6, &[0.0, 0.0], &[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let omega: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let st = m_step(&ds, &omega, &ModelSpec::setm()).unwrap();
        assert_eq!(st.theta.alpha1, 0.0);
        assert!(st.theta.beta1.iter().all(|&b| b == 0.0));
        assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        let s: f64 = ds
            .features()
            .rows()
            .zip(&st.weights)
            .map(|(x, p)| p * st.theta.log_ratio2(x).exp())
            .sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn multinomial_fit_is_stationary_and_locally_optimal() {
        let ds = pu_data(5, 15, 20, 0.5, &[0.3], &[1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let omega: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let params = fit_weighted_multinomial(&ds, &omega).unwrap();
        let at = q_objective(&ds, &omega, &params).unwrap();
        assert!(at.grad.iter().all(|g| g.abs() <= 1e-9));
        let x = params.to_vec();
        for _ in 0..100 {
            let y: Vec<f64> = x
                .iter()
                .map(|v| v + rng.random_range(-0.05..0.05))
                .collect();
            let e = q_objective(&ds, &omega, &MultinomialParams::from_vec(&y)).unwrap();
            assert!(e.value <= at.value + 1e-12);
        }
    }

    #[test]
    fn multinomial_fit_with_identical_distributions() {
        let ds = pu_data(7, 5000, 5000, 1.0, &[0.0, 0.0], &[0.0, 0.0]);
        let params = fit_weighted_multinomial(&ds, &vec![1.0; 5000]).unwrap();
        assert!(
            params.beta1.iter().all(|b| b.abs() <= 0.1),
            "{:?}",
            params.beta1
        );
    }

    #[test]
    fn em_trace_is_monotone_and_nonpositive() {
        for seed in 0..6 {
            let ds = pu_data(10 + seed, 80, 120, 0.6, &[0.0, 0.5], &[1.5, 1.0]);
            for spec in [
                ModelSpec::detm(),
                ModelSpec::setm(),
                ModelSpec::detm().with_fixed_pi(0.4),
            ] {
                let fr = fit(&ds, &spec, &FitOptions { seed, ..quick() }).unwrap();
                for w in fr.trace.windows(2) {
                    assert!(w[1] - w[0] >= -1e-9, "{spec:?}: {} -> {}", w[0], w[1]);
                }
                assert!(fr.trace.iter().all(|&l| l <= 0.0));
            }
        }
    }

    #[test]
    fn fit_result_invariants() {
        let ds = pu_data(20, 300, 300, 0.7, &[0.0, 0.0], &[1.0, 1.0]);
        let fr = fit(&ds, &ModelSpec::detm(), &quick()).unwrap();
        assert!(fr.converged);
        assert!((fr.el_weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(fr.el_weights.iter().all(|&p| p >= 0.0));
        let lam = solve_lagrange(&ds, &fr.theta).unwrap();
        let w = el_weights(&ds, &fr.theta, &lam).unwrap();
        for (a, b) in w.iter().zip(&fr.el_weights) {
            assert!((a - b).abs() <= 1e-6);
        }
        let big_n = ds.total() as f64;
        assert!((fr.profile_log_el - (fr.log_el + big_n * big_n.ln())).abs() < 1e-4);
    }

    #[test]
    fn setm_nests_in_detm() {
        for seed in 0..4 {
            let ds = pu_data(30 + seed, 150, 150, 0.7, &[0.5, 0.0], &[1.0, 1.0]);
            let s = fit(&ds, &ModelSpec::setm(), &quick()).unwrap();
            let d = fit_with_starts(
                &ds,
                &ModelSpec::detm(),
                &quick(),
                core::slice::from_ref(&s.theta),
            )
            .unwrap();
            assert!(d.profile_log_el >= s.profile_log_el - 1e-8);
            assert_eq!(s.theta.alpha1, 0.0);
        }
    }

    #[test]
    fn fixed_pi_at_mele_reproduces_profile() {
        let ds = pu_data(40, 300, 300, 0.7, &[0.0, 0.0], &[1.2, 1.0]);
        let opts = FitOptions {
            tol: 1e-10,
            ..quick()
        };
        let full = fit(&ds, &ModelSpec::detm(), &opts).unwrap();
        let fixed = fit_with_starts(
            &ds,
            &ModelSpec::detm().with_fixed_pi(full.theta.pi),
            &opts,
            core::slice::from_ref(&full.theta),
        )
        .unwrap();
        assert!((full.profile_log_el - fixed.profile_log_el).abs() < 1e-6);
    }

    #[test]
    fn label_switch_canonicalizes() {
        let ds = pu_data(50, 2000, 2000, 0.7, &[0.0, 0.0], &[1.5, 1.5]);
        let fr = fit(&ds, &ModelSpec::detm(), &quick()).unwrap();
        let switched = fr.switched();
        for rule in [LabelRule::KlRule, LabelRule::PiLessHalf] {
            let a = resolve_label_switch(&fr, &ds, rule).unwrap();
            let b = resolve_label_switch(&switched, &ds, rule).unwrap();
            assert_eq!(a.theta, b.theta);
            let again = resolve_label_switch(&a, &ds, rule).unwrap();
            assert_eq!(again.theta, a.theta);
            assert_eq!(
                profile_log_el(&ds, &a.theta).unwrap(),
                profile_log_el(&ds, &a.theta).unwrap()
            );
        }
        let kl = resolve_label_switch(&fr, &ds, LabelRule::KlRule).unwrap();
        assert!(kl.theta.pi > 0.5, "pi = {}", kl.theta.pi);
        let half = resolve_label_switch(&fr, &ds, LabelRule::PiLessHalf).unwrap();
        assert!(half.theta.pi < 0.5);
    }

    #[test]
    fn pi_less_half_tie() {
        let ds = pu_data(60, 30, 30, 0.5, &[0.0], &[1.0]);
        let mut fr = fit(&ds, &ModelSpec::detm(), &quick()).unwrap();
        fr.theta.pi = 0.5;
        assert!(matches!(
            resolve_label_switch(&fr, &ds, LabelRule::PiLessHalf),
            Err(Error::Tie(_))
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = pu_data(70, 100, 100, 0.6, &[0.0, 0.3], &[1.0, 1.0]);
        let a = fit(&ds, &ModelSpec::detm(), &quick()).unwrap();
        let b = fit(&ds, &ModelSpec::detm(), &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_deficient_data_is_rejected() {
        let src = [vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let tgt = [vec![1.0, 0.5], vec![1.0, 3.0]];
        let ds = Dataset::from_rows(&src, &tgt).unwrap();
        assert!(matches!(
            fit(&ds, &ModelSpec::detm(), &quick()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn label_rule_text() {
        for r in [LabelRule::PiLessHalf, LabelRule::KlRule, LabelRule::None] {
            assert_eq!(r.as_str().parse::<LabelRule>().unwrap(), r);
        }
        assert!("pi<0.5".parse::<LabelRule>().is_err());
    }
}
