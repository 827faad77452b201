//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `PUDETM_ACCEPTANCE=C1,C9` restricts the run to the listed criteria;
//! `PUDETM_MOBILE_CSV` points C10 at the mobile-price training file.

// small dense solves read best with explicit indices; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::time::Instant;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use pudetm::simulate::{
    generate_pu, median, run_cell, Cell, Measurements, ReplicateOutcome, ScenarioConfig,
    ScenarioKind, Task,
};
use pudetm_core::{
    chi2_cdf, chi2_quantile, chi2_sf, fit, fit_with_starts, gof_test_scar, q_objective, Dataset,
    FitOptions, Matrix, ModelKind, ModelSpec, MultinomialParams, ProfileLikelihood, Theta,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MASTER_SEED: u64 = 20_241_019;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Self {
            pass: Some(pass),
            detail,
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self {
            pass: None,
            detail: detail.into(),
        }
    }
}

/// Monte-Carlo cells, run once and shared between criteria.
#[derive(Default)]
struct Cells {
    done: HashMap<&'static str, Vec<ReplicateOutcome>>,
}

/// One start: the logistic start. See the harness notes in the README.
fn mc_options() -> FitOptions {
    FitOptions {
        n_starts: 1,
        ..FitOptions::default()
    }
}

fn sar(pi: f64, n: usize) -> ScenarioConfig {
    ScenarioConfig::sar(pi, n, n)
}

impl Cells {
    fn get(&mut self, name: &'static str) -> &[ReplicateOutcome] {
        if !self.done.contains_key(name) {
            let (index, cell) = cell_definition(name);
            let t = Instant::now();
            let out = run_cell(&cell, &mc_options(), MASTER_SEED, index);
            eprintln!(
                "  [cell {name}: {} replicates in {:.1} s]",
                cell.replicates,
                t.elapsed().as_secs_f64()
            );
            self.done.insert(name, out);
        }
        &self.done[name]
    }
}

fn cell_definition(name: &str) -> (usize, Cell) {
    let scar = ScenarioConfig::scar;
    match name {
        "null5000" => (
            0,
            Cell::new(name, scar(0.75, 5000, 5000), &[Task::Test], 500),
        ),
        "alt1000" => {
            let mut mu = vec![0.0; 15];
            mu[0] = 1.0;
            let sc = ScenarioConfig::new(ScenarioKind::Sar, mu, 0.75, 1000, 1000);
            (1, Cell::new(name, sc, &[Task::Test], 200))
        }
        "scar2000" => (
            2,
            Cell::new(
                name,
                scar(0.3, 2000, 2000),
                &[Task::Estimate, Task::Classify],
                200,
            ),
        ),
        "sar2000_03" => (3, Cell::new(name, sar(0.3, 2000), &[Task::Estimate], 200)),
        "sar5000" => (
            4,
            Cell::new(
                name,
                sar(0.7, 5000),
                &[Task::Estimate, Task::Coverage, Task::Classify],
                200,
            ),
        ),
        "scar5000" => (
            5,
            Cell::new(name, scar(0.7, 5000, 5000), &[Task::Coverage], 200),
        ),
        "l1_2000" => (
            6,
            Cell::new(name, scar(0.3, 1000, 1000), &[Task::Posterior], 100),
        ),
        "l1_8000" => (
            7,
            Cell::new(name, scar(0.3, 4000, 4000), &[Task::Posterior], 100),
        ),
        other => panic!("unknown cell {other}"),
    }
}

fn ok(outcomes: &[ReplicateOutcome]) -> impl Iterator<Item = &Measurements> {
    outcomes
        .iter()
        .filter(|o| o.error.is_none())
        .map(|o| &o.measurements)
}

fn failures(outcomes: &[ReplicateOutcome]) -> usize {
    outcomes.iter().filter(|o| o.error.is_some()).count()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn share(flags: impl Iterator<Item = bool>) -> (f64, usize) {
    let (mut hits, mut total) = (0usize, 0usize);
    for f in flags {
        total += 1;
        hits += usize::from(f);
    }
    (hits as f64 / total as f64, total)
}

// ---------------------------------------------------------------- C1

/// Maximizes Σ log p_i subject to Σ p_i = 1 and Σ p_i e^{η_ti} = 1 by an
/// infeasible-start Newton method on the primal. Returns None when the
/// constraints cannot be met with positive masses.
fn el_primal(eta: &[[f64; 2]]) -> Option<f64> {
    let n = eta.len();
    let rows: Vec<[f64; 3]> = eta.iter().map(|e| [1.0, e[0].exp(), e[1].exp()]).collect();
    let mut p = vec![1.0 / n as f64; n];
    let residual = |p: &[f64]| -> [f64; 3] {
        let mut r = [-1.0; 3];
        for (pi, a) in p.iter().zip(&rows) {
            for k in 0..3 {
                r[k] += pi * a[k];
            }
        }
        r
    };
    for _ in 0..500 {
        // (A P² Aᵀ) ν = b − 2Ap, then Δ = p + P² Aᵀ ν
        let mut m = [[0.0; 3]; 3];
        let mut rhs = [1.0; 3];
        for (pi, a) in p.iter().zip(&rows) {
            for r in 0..3 {
                rhs[r] -= 2.0 * pi * a[r];
                for c in 0..3 {
                    m[r][c] += pi * pi * a[r] * a[c];
                }
            }
        }
        let nu = solve3(m, rhs)?;
        let delta: Vec<f64> = p
            .iter()
            .zip(&rows)
            .map(|(pi, a)| pi + pi * pi * (nu[0] * a[0] + nu[1] * a[1] + nu[2] * a[2]))
            .collect();
        let mut t = 1.0;
        while p.iter().zip(&delta).any(|(pi, d)| pi + t * d <= 0.0) {
            t *= 0.5;
            if t < 1e-30 {
                return None;
            }
        }
        for (pi, d) in p.iter_mut().zip(&delta) {
            *pi += t * d;
        }
        let step = delta
            .iter()
            .zip(&p)
            .map(|(d, pi)| (d / pi).abs())
            .fold(0.0, f64::max);
        let feas = residual(&p).iter().map(|r| r.abs()).fold(0.0, f64::max);
        let size = rows.iter().flatten().fold(1.0, |a: f64, &b| a.max(b));
        if t == 1.0 && step < 1e-12 && feas < 1e-13 * size {
            return Some(p.iter().map(|x| x.ln()).sum());
        }
    }
    None
}

/// Gaussian elimination with full pivoting; a redundant equation (two
/// identical tilts) contributes a zero component.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = (0..3).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut col = [0usize, 1, 2];
    let mut rank = 3;
    for c in 0..3 {
        let (mut pr, mut pc, mut best) = (c, c, 0.0);
        for r in c..3 {
            for k in c..3 {
                if a[r][k].abs() > best {
                    (pr, pc, best) = (r, k, a[r][k].abs());
                }
            }
        }
        if best <= 1e-13 * scale {
            rank = c;
            break;
        }
        a.swap(c, pr);
        b.swap(c, pr);
        for row in a.iter_mut() {
            row.swap(c, pc);
        }
        col.swap(c, pc);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut y = [0.0; 3];
    for r in (0..rank).rev() {
        let s: f64 = (r + 1..rank).map(|k| a[r][k] * y[k]).sum();
        y[r] = (b[r] - s) / a[r][r];
    }
    let mut x = [0.0; 3];
    for (k, &c) in col.iter().enumerate() {
        x[c] = y[k];
    }
    Some(x)
}

#[derive(Clone, Copy)]
/// `ℓ_EL + N log N` maximized over the point masses at θ = (α1, α2, β1, β2, logit π).
struct Oracle<'a> {
    source: &'a [f64],
    target: &'a [f64],
}

impl Oracle<'_> {
    /// Five parameters, or two (α, β) for the family with equal tilts.
    fn value(&self, v: &[f64]) -> Option<f64> {
        let (a1, a2, b1, b2, pi) = match *v {
            [a, b] => (a, a, b, b, 0.5),
            [a1, a2, b1, b2, z] => (a1, a2, b1, b2, 1.0 / (1.0 + (-z).exp())),
            _ => unreachable!(),
        };
        let eta: Vec<[f64; 2]> = self
            .source
            .iter()
            .chain(self.target)
            .map(|x| [a1 + b1 * x, a2 + b2 * x])
            .collect();
        let big_n = eta.len() as f64;
        let masses = el_primal(&eta)?;
        let mix: f64 = eta[self.source.len()..]
            .iter()
            .map(|e| (pi * e[0].exp() + (1.0 - pi) * e[1].exp()).ln())
            .sum();
        Some(masses + mix + big_n * big_n.ln())
    }
}

impl CostFunction for Oracle<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, v: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.value(v).map_or(1e10, |f| -f))
    }
}

fn nelder_mead(oracle: &Oracle<'_>, x0: Vec<f64>, scale: f64) -> (Vec<f64>, f64) {
    let mut best = x0;
    let mut best_cost = oracle.cost(&best).unwrap();
    // restarts from the incumbent shake Nelder-Mead out of collapsed simplices
    for _ in 0..6 {
        let mut simplex = vec![best.clone()];
        for k in 0..best.len() {
            let mut v = best.clone();
            v[k] += scale;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-13).unwrap();
        let res = Executor::new(*oracle, solver)
            .configure(|s| s.max_iters(4000))
            .run()
            .unwrap();
        let state = res.state;
        if let (Some(p), c) = (state.best_param, state.best_cost) {
            if c < best_cost - 1e-12 {
                best = p;
                best_cost = c;
                continue;
            }
        }
        break;
    }
    (best, -best_cost)
}

/// Largest spread of either tilt over the pooled sample at an oracle point.
fn oracle_spread(v: &[f64], xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let tilts: Vec<(f64, f64)> = match *v {
        [a, b] => vec![(a, b)],
        _ => vec![(v[0], v[2]), (v[1], v[3])],
    };
    tilts
        .iter()
        .map(|&(a, b)| {
            let (lo, hi) = xs
                .clone()
                .map(|x| a + b * x)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), e| {
                    (l.min(e), h.max(e))
                });
            hi - lo
        })
        .fold(0.0, f64::max)
}

fn c1() -> Outcome {
    let opts = FitOptions {
        n_starts: 10,
        tol: 1e-11,
        max_em_iter: 50_000,
        ..FitOptions::default()
    };
    let verbose = std::env::var_os("PUDETM_ACCEPTANCE_VERBOSE").is_some();
    let mut worst: f64 = 0.0;
    let (mut checked, mut drawn, mut unbounded, mut em_errors) = (0, 0, 0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED ^ 0xC1);
    while checked < 25 && drawn < 400 {
        drawn += 1;
        let mut jitter =
            |lo: i32, hi: i32| rng.random_range(lo..=hi) as f64 + rng.random_range(-0.3..0.3);
        let source: Vec<f64> = (0..3).map(|_| jitter(-2, 2)).collect();
        let target: Vec<f64> = (0..4).map(|_| jitter(-2, 2)).collect();
        let rows = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        let ds = Dataset::from_rows(&rows(&source), &rows(&target)).unwrap();
        let oracle = Oracle {
            source: &source,
            target: &target,
        };

        let mut starts: Vec<Vec<f64>> = Vec::new();
        for _ in 0..8 {
            starts.push(vec![
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-2.0..2.0),
            ]);
        }
        for _ in 0..3 {
            starts.push(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
        }
        let em = fit(&ds, &ModelSpec::detm(), &opts);
        if let Ok(fr) = &em {
            let t = &fr.theta;
            let logit = (t.pi / (1.0 - t.pi)).ln();
            starts.push(vec![t.alpha1, t.alpha2, t.beta1[0], t.beta2[0], logit]);
            starts.push(vec![
                0.5 * (t.alpha1 + t.alpha2),
                0.5 * (t.beta1[0] + t.beta2[0]),
            ]);
        }
        let (mut best, mut arg) = (f64::NEG_INFINITY, Vec::new());
        for s in starts {
            let (x, v) = nelder_mead(&oracle, s, 0.3);
            if v > best {
                (best, arg) = (v, x);
            }
        }
        let pooled = source.iter().chain(&target).copied();
        let em_unbounded = em.as_ref().is_ok_and(|fr| fr.degenerate);
        if em_unbounded || oracle_spread(&arg, pooled) > pudetm_core::DEGENERATE_SPREAD {
            unbounded += 1;
            continue;
        }
        let gap = match &em {
            Ok(fr) => (best - fr.profile_log_el).abs(),
            Err(_) => {
                em_errors += 1;
                f64::INFINITY
            }
        };
        if verbose {
            let em_value = em.as_ref().map(|fr| fr.profile_log_el);
            eprintln!("    instance {checked}: EM {em_value:?} oracle {best:.8} at {arg:?}");
        }
        worst = worst.max(gap);
        checked += 1;
    }
    Outcome::check(
        checked == 25 && worst <= 1e-4,
        format!(
            "max |EM - oracle| = {worst:.2e} over {checked} instances (tol 1e-4, {em_errors} EM errors); \
             {unbounded} of {drawn} draws skipped, supremum at infinity"
        ),
    )
}

// ---------------------------------------------------------------- C2

fn c2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED ^ 0xC2);
    let (mut completed, mut errors, mut bad_step, mut positive) = (0, 0, 0, 0);
    let mut worst_step: f64 = 0.0;
    for k in 0..1000 {
        let p = rng.random_range(1..=3);
        let mu_pos: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut sc = ScenarioConfig::new(
            ScenarioKind::Custom,
            mu_pos,
            rng.random_range(0.15..0.85),
            rng.random_range(20..=200),
            rng.random_range(20..=200),
        );
        sc.mu_target_neg = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
        sc.validation_size = 1;
        let ds = generate_pu(&sc, &mut rng).unwrap().dataset;
        let slope = |rng: &mut ChaCha8Rng| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let warm = Theta {
            alpha1: rng.random_range(-1.0..1.0),
            alpha2: rng.random_range(-1.0..1.0),
            beta1: slope(&mut rng),
            beta2: slope(&mut rng),
            pi: rng.random_range(0.05..0.95),
        };
        let opts = FitOptions {
            n_starts: 1,
            seed: k,
            accelerate: k % 2 == 0,
            ..FitOptions::default()
        };
        let Ok(fr) = fit_with_starts(&ds, &ModelSpec::detm(), &opts, &[warm]) else {
            errors += 1;
            continue;
        };
        completed += 1;
        let drop = fr
            .trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max);
        worst_step = worst_step.max(drop);
        bad_step += usize::from(drop > 1e-9);
        if drop > 1e-9 && std::env::var_os("PUDETM_ACCEPTANCE_VERBOSE").is_some() {
            let at = fr
                .trace
                .windows(2)
                .position(|w| w[0] - w[1] > 1e-9)
                .unwrap();
            eprintln!(
                "    fit {k}: p {p} n {} m {} accelerate {} drop {drop:.2e} at step {at} of {}; trace {:?}; theta {:?}",
                ds.n(), ds.m(), opts.accelerate, fr.trace.len(),
                &fr.trace[at.saturating_sub(2)..(at + 3).min(fr.trace.len())], fr.theta
            );
        }
        positive += usize::from(fr.trace.iter().any(|&l| l > 0.0));
    }
    // errors are reported; the property is checked on every fit that returns
    Outcome::check(
        bad_step == 0 && positive == 0 && completed >= 950,
        format!(
            "{completed} fits checked ({errors} returned errors): {bad_step} with an increment below -1e-9 \
             (largest drop {worst_step:.1e}), {positive} with a positive log-EL"
        ),
    )
}

// ---------------------------------------------------------------- C3, C7

fn c3(cells: &mut Cells) -> Outcome {
    let null = cells.get("null5000");
    let first: Vec<&ReplicateOutcome> = null.iter().take(200).collect();
    let failed = first.iter().filter(|o| o.error.is_some()).count();
    let (size, used) = share(
        first
            .iter()
            .filter(|o| o.error.is_none())
            .filter_map(|o| o.measurements.reject),
    );
    let alt = cells.get("alt1000");
    let (power, alt_used) = share(ok(alt).filter_map(|m| m.reject));
    let alt_failed = failures(alt);
    Outcome::check(
        (0.02..=0.10).contains(&size) && power >= 0.99 && failed + alt_failed <= 10,
        format!(
            "type-I error {:.1}% in [2%, 10%] ({used} reps, {failed} failed); \
             power {:.1}% >= 99% ({alt_used} reps, {alt_failed} failed)",
            100.0 * size,
            100.0 * power
        ),
    )
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sq = (n as f64).sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    let mut q = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        q += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

fn c7(cells: &mut Cells) -> Outcome {
    let null = cells.get("null5000");
    let failed = failures(null);
    let mut r: Vec<f64> = ok(null).filter_map(|m| m.statistic).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len();
    let d = r
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = chi2_cdf(x, 15).unwrap();
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let pv = ks_p_value(d, n);
    let (mean, _) = mean_sd(&r);
    Outcome::check(
        pv >= 0.01 && failed <= 25,
        format!("KS D = {d:.4}, p = {pv:.3} >= 0.01 against chi2(15); mean R = {mean:.2} ({n} reps, {failed} failed)"),
    )
}

// ---------------------------------------------------------------- C4

fn c4(cells: &mut Cells) -> Outcome {
    let scar = cells.get("scar2000");
    let scar_failed = failures(scar);
    let est: Vec<f64> = ok(scar).filter_map(|m| m.pi_detm).collect();
    let (mean, sd) = mean_sd(&est);
    let scar_ok = (mean - 0.3).abs() <= 0.005 && (0.006..=0.018).contains(&sd);

    let collapse = cells.get("sar2000_03");
    let collapse_failed = failures(collapse);
    let (low, used) = share(ok(collapse).filter_map(|m| m.pi_setm.map(|p| p <= 0.05)));

    let sar = cells.get("sar5000");
    let sar_failed = failures(sar);
    let sar_est: Vec<f64> = ok(sar).filter_map(|m| m.pi_detm).collect();
    let (sar_mean, sar_sd) = mean_sd(&sar_est);
    Outcome::check(
        scar_ok
            && low >= 0.95
            && (sar_mean - 0.7).abs() <= 0.02
            && scar_failed + collapse_failed + sar_failed <= 10,
        format!(
            "SCAR DETM {mean:.4} ({sd:.4}) [{} reps, {scar_failed} failed]; \
             SAR SETM pi <= 0.05 in {:.1}% [{used} reps, {collapse_failed} failed]; \
             SAR DETM {sar_mean:.4} ({sar_sd:.4}) [{} reps, {sar_failed} failed]",
            est.len(),
            100.0 * low,
            sar_est.len()
        ),
    )
}

// ---------------------------------------------------------------- C5

fn coverage(outcomes: &[ReplicateOutcome], setm: bool) -> (f64, usize, usize) {
    let ci = |m: &Measurements| if setm { m.ci_setm } else { m.ci_detm };
    let (rate, used) = share(ok(outcomes).filter_map(|m| ci(m).map(|c| c.covered)));
    let open = ok(outcomes).filter_map(ci).filter(|c| c.open).count();
    (rate, used, open)
}

fn c5(cells: &mut Cells) -> Outcome {
    let sar = cells.get("sar5000");
    let (sar_cov, sar_used, sar_open) = coverage(sar, false);
    let (setm_cov, setm_used, _) = coverage(sar, true);
    let scar = cells.get("scar5000");
    let scar_failed = failures(scar);
    let (scar_cov, scar_used, scar_open) = coverage(scar, false);
    let nominal = 0.90..=0.98;
    Outcome::check(
        nominal.contains(&sar_cov)
            && nominal.contains(&scar_cov)
            && setm_cov <= 0.10
            && scar_failed <= 10,
        format!(
            "DETM coverage SAR {:.1}% ({sar_used} reps, {sar_open} open), SCAR {:.1}% ({scar_used} reps, \
             {scar_open} open, {scar_failed} failed); SETM coverage SAR {:.1}% ({setm_used} reps)",
            100.0 * sar_cov,
            100.0 * scar_cov,
            100.0 * setm_cov
        ),
    )
}

// ---------------------------------------------------------------- C6

fn c6(cells: &mut Cells) -> Outcome {
    let sar = cells.get("sar5000");
    let first: Vec<ReplicateOutcome> = sar.iter().take(100).cloned().collect();
    let sar_acc: Vec<f64> = ok(&first).filter_map(|m| m.accuracy_detm).collect();
    let sar_oracle: Vec<f64> = ok(&first).filter_map(|m| m.accuracy_oracle).collect();
    let sar_med = median(&sar_acc);
    let scar = cells.get("scar2000");
    let scar_acc: Vec<f64> = ok(scar).filter_map(|m| m.accuracy_detm).collect();
    let (scar_mean, _) = mean_sd(&scar_acc);
    Outcome::check(
        sar_med >= 0.87 && scar_mean >= 0.95,
        format!(
            "SAR median accuracy {:.2}% >= 87% (oracle {:.2}%, {} reps); SCAR mean accuracy {:.2}% >= 95% ({} reps)",
            100.0 * sar_med,
            100.0 * median(&sar_oracle),
            sar_acc.len(),
            100.0 * scar_mean,
            scar_acc.len()
        ),
    )
}

// ---------------------------------------------------------------- C8

fn c8(cells: &mut Cells) -> Outcome {
    let small: Vec<f64> = ok(cells.get("l1_2000"))
        .filter_map(|m| m.l1_distance)
        .collect();
    let large: Vec<f64> = ok(cells.get("l1_8000"))
        .filter_map(|m| m.l1_distance)
        .collect();
    let (a, b) = (median(&small), median(&large));
    Outcome::check(
        b <= 0.7 * a,
        format!(
            "median L1 {b:.4} at N = 8000 vs {a:.4} at N = 2000, ratio {:.3} <= 0.7 ({} and {} reps)",
            b / a,
            large.len(),
            small.len()
        ),
    )
}

// ---------------------------------------------------------------- C9

fn c9() -> Outcome {
    let mut worst_chi: f64 = 0.0;
    for df in 1..=60 {
        for k in 1..200 {
            let q = k as f64 / 200.0;
            for q in [q, 1e-6 * k as f64] {
                let x = chi2_quantile(q, df).unwrap();
                worst_chi = worst_chi.max((chi2_sf(x, df).unwrap() - (1.0 - q)).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED ^ 0xC9);
    let mut worst_grad: f64 = 0.0;
    let mut worst_hess: f64 = 0.0;
    for _ in 0..100 {
        let p = rng.random_range(1..=4);
        let mut sc = ScenarioConfig::new(
            ScenarioKind::Custom,
            (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
            0.5,
            rng.random_range(10..=60),
            rng.random_range(10..=60),
        );
        sc.validation_size = 1;
        let ds = generate_pu(&sc, &mut rng).unwrap().dataset;
        let omega: Vec<f64> = (0..ds.m()).map(|_| rng.random::<f64>()).collect();
        let v: Vec<f64> = (0..2 * p + 2)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let eval = |v: &[f64]| q_objective(&ds, &omega, &MultinomialParams::from_vec(v)).unwrap();
        let at = eval(&v);
        // fourth-order central differences
        let d = |f: &dyn Fn(&[f64]) -> f64, k: usize| {
            let h = 1e-3;
            let shifted = |s: f64| {
                let mut w = v.clone();
                w[k] += s * h;
                f(&w)
            };
            (8.0 * (shifted(1.0) - shifted(-1.0)) - (shifted(2.0) - shifted(-2.0))) / (12.0 * h)
        };
        let gscale = at.grad.iter().fold(1.0, |a: f64, g| a.max(g.abs()));
        let hscale = (0..v.len())
            .flat_map(|i| (0..v.len()).map(move |j| (i, j)))
            .fold(1.0, |a: f64, (i, j)| a.max(at.hess[(i, j)].abs()));
        for k in 0..v.len() {
            let g = d(&|w| eval(w).value, k);
            worst_grad = worst_grad.max((g - at.grad[k]).abs() / gscale);
            for j in 0..v.len() {
                let h = d(&|w| eval(w).grad[j], k);
                worst_hess = worst_hess.max((h - at.hess[(j, k)]).abs() / hscale);
            }
        }
    }
    Outcome::check(
        worst_chi <= 1e-8 && worst_grad <= 1e-6 && worst_hess <= 1e-6,
        format!(
            "chi2 round trip {worst_chi:.1e} <= 1e-8; q_objective gradient {worst_grad:.1e}, \
             Hessian {worst_hess:.1e} <= 1e-6 relative (100 points)"
        ),
    )
}

// ---------------------------------------------------------------- C10

/// Mobile-price data: classes 0 and 1 are target positives, 2 the labeled
/// source, 3 target negatives; every other column is a feature.
fn mobile_dataset(path: &str) -> Result<Dataset, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let label = headers
        .iter()
        .position(|h| h == "price_range")
        .ok_or("no price_range column")?;
    let (mut source, mut target) = (Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let mut x = Vec::with_capacity(rec.len() - 1);
        let mut class = 0;
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format!("bad number {field:?}"))?;
            if k == label {
                class = v as i64;
            } else {
                x.push(v);
            }
        }
        match class {
            2 => source.push(x),
            0 | 1 | 3 => target.push(x),
            other => return Err(format!("unexpected price_range {other}")),
        }
    }
    let p = source.first().ok_or("empty file")?.len();
    let flat = |rows: &[Vec<f64>]| Matrix::from_vec(rows.len(), p, rows.concat()).unwrap();
    let pooled = Matrix::from_vec(
        source.len() + target.len(),
        p,
        source.iter().chain(&target).flatten().copied().collect(),
    )
    .unwrap();
    let st = pudetm::model::Standardization::from_matrix(&pooled);
    Dataset::new(
        st.apply(&flat(&source)).map_err(|e| e.to_string())?,
        st.apply(&flat(&target)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())
}

fn c10() -> Outcome {
    let Ok(path) = std::env::var("PUDETM_MOBILE_CSV") else {
        return Outcome::skip("PUDETM_MOBILE_CSV is not set");
    };
    let ds = match mobile_dataset(&path) {
        Ok(ds) => ds,
        Err(e) => return Outcome::check(false, format!("cannot read {path}: {e}")),
    };
    let opts = FitOptions::default();
    let test = match gof_test_scar(&ds, &opts) {
        Ok(t) => t,
        Err(e) => return Outcome::check(false, format!("test failed: {e}")),
    };
    let mut prof = ProfileLikelihood::from_fit(&ds, ModelKind::Detm, &opts, test.fit_full.clone());
    let pi_hat = prof.pi_hat();
    let ci = match prof.confidence_interval(0.95, false) {
        Ok(ci) => ci,
        Err(e) => return Outcome::check(false, format!("interval failed: {e}")),
    };
    let r = test.statistic;
    Outcome::check(
        (r - 1218.628).abs() <= 0.05 * 1218.628
            && (pi_hat - 0.667).abs() <= 0.01
            && (ci.lower.value - 0.6425).abs() <= 0.01
            && (ci.upper.value - 0.6903).abs() <= 0.01,
        format!(
            "R = {r:.3} (target 1218.628 +/- 5%), pi = {pi_hat:.4} (0.667 +/- 0.01), \
             CI [{:.4}, {:.4}] ([0.6425, 0.6903] +/- 0.01)",
            ci.lower.value, ci.upper.value
        ),
    )
}

// ---------------------------------------------------------------- main

type Criterion = fn(&mut Cells) -> Outcome;

fn main() {
    let only: Option<Vec<String>> = std::env::var("PUDETM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).collect());
    // cheap criteria first; the Monte-Carlo cells are shared from C3 on
    let criteria: Vec<(&str, &str, Criterion)> = vec![
        ("C9", "numerics", |_| c9()),
        ("C1", "brute-force oracle", |_| c1()),
        ("C2", "monotone EM", |_| c2()),
        ("C10", "mobile-price data", |_| c10()),
        ("C8", "posterior L1 rate", c8),
        ("C3", "SCAR test size and power", c3),
        ("C7", "null distribution of R", c7),
        ("C4", "estimation of pi", c4),
        ("C6", "classification accuracy", c6),
        ("C5", "interval coverage", c5),
    ];
    let mut cells = Cells::default();
    let mut failed = 0;
    let total = Instant::now();
    for (id, title, run) in criteria {
        if let Some(list) = &only {
            if !list.iter().any(|c| c == id) {
                continue;
            }
        }
        let t = Instant::now();
        let out = run(&mut cells);
        let status = match out.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!(
            "{id:<3} {status}  {title}: {}  [{:.1} s]",
            out.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {failed} failed, {:.1} s total",
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
