//! Data-generating mechanisms and the Monte-Carlo experiment runner.
//!
//! Every replicate draws from its own ChaCha stream selected by
//! `(master seed, cell index, replicate index)`, so results do not depend on
//! how replicates are scheduled across threads. Aggregation runs after all
//! replicates of a cell are collected in index order.

use std::collections::BTreeMap;

use pudetm_core::{
    accuracy, fit, gof_test_scar_from_fit, l1_posterior_distance, predict, Dataset, FitOptions,
    Matrix, ModelKind, ModelSpec, ProfileLikelihood, Theta,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Target positives share the source distribution.
    Scar,
    Sar,
    Custom,
}

/// How many target rows are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveCount {
    #[default]
    Binomial,
    /// `round(m π)` positives in every replicate.
    Fixed,
}

/// Multivariate normal populations with identity covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub p: usize,
    pub mu_source: Vec<f64>,
    pub mu_target_pos: Vec<f64>,
    pub mu_target_neg: Vec<f64>,
    pub pi: f64,
    pub n: usize,
    pub m: usize,
    pub validation_size: usize,
    #[serde(default)]
    pub positives: PositiveCount,
}

impl ScenarioConfig {
    /// Source `N(0, I)`, target negatives `N(1, I)`, target positives
    /// `N(mu_pos, I)`; validation size equals `n`.
    pub fn new(kind: ScenarioKind, mu_pos: Vec<f64>, pi: f64, n: usize, m: usize) -> Self {
        let p = mu_pos.len();
        Self {
            kind,
            p,
            mu_source: vec![0.0; p],
            mu_target_pos: mu_pos,
            mu_target_neg: vec![1.0; p],
            pi,
            n,
            m,
            validation_size: n,
            positives: PositiveCount::Binomial,
        }
    }

    /// SCAR scenario with 15 features.
    pub fn scar(pi: f64, n: usize, m: usize) -> Self {
        Self::new(ScenarioKind::Scar, vec![0.0; 15], pi, n, m)
    }

    /// SAR scenario with target positives at `(1, ..., 1, 0, ..., 0)`
    /// (seven ones, eight zeros).
    pub fn sar(pi: f64, n: usize, m: usize) -> Self {
        let mut mu = vec![0.0; 15];
        mu[..7].fill(1.0);
        Self::new(ScenarioKind::Sar, mu, pi, n, m)
    }

    /// Checks sizes and lengths; a SCAR scenario needs the target positive
    /// mean equal to the source mean.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        for (name, v) in [
            ("mu_source", &self.mu_source),
            ("mu_target_pos", &self.mu_target_pos),
            ("mu_target_neg", &self.mu_target_neg),
        ] {
            if v.len() != self.p {
                return bad(format!(
                    "{name} has length {}, expected p = {}",
                    v.len(),
                    self.p
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad(format!("pi = {} is outside (0, 1)", self.pi));
        }
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be positive".into());
        }
        if self.kind == ScenarioKind::Scar && self.mu_target_pos != self.mu_source {
            return bad("a scar scenario needs mu_target_pos equal to mu_source".into());
        }
        Ok(())
    }

    /// Population parameters: component 1 is the target positive class.
    pub fn true_theta(&self) -> Theta {
        let tilt = |mu: &[f64]| -> (f64, Vec<f64>) {
            let beta: Vec<f64> = mu.iter().zip(&self.mu_source).map(|(a, b)| a - b).collect();
            let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            (-(sq(mu) - sq(&self.mu_source)) / 2.0, beta)
        };
        let (alpha1, beta1) = tilt(&self.mu_target_pos);
        let (alpha2, beta2) = tilt(&self.mu_target_neg);
        Theta {
            alpha1,
            alpha2,
            beta1,
            beta2,
            pi: self.pi,
        }
    }
}

/// `n` rows of `N(mu, I)`.
pub fn sample_mvn<R: Rng + ?Sized>(mu: &[f64], n: usize, rng: &mut R) -> Matrix {
    let p = mu.len();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        for &m in mu {
            let z: f64 = StandardNormal.sample(rng);
            data.push(m + z);
        }
    }
    Matrix::from_vec(n, p, data).expect("length matches by construction")
}

/// One simulated positive-unlabeled sample plus labeled validation data.
#[derive(Debug, Clone, PartialEq)]
pub struct PuSample {
    pub dataset: Dataset,
    /// Hidden labels of the target rows.
    pub target_labels: Vec<u8>,
    pub validation_x: Matrix,
    pub validation_y: Vec<u8>,
}

fn mixture<R: Rng + ?Sized>(cfg: &ScenarioConfig, size: usize, rng: &mut R) -> (Matrix, Vec<u8>) {
    let k = match cfg.positives {
        PositiveCount::Binomial => Binomial::new(size as u64, cfg.pi)
            .expect("pi validated")
            .sample(rng) as usize,
        PositiveCount::Fixed => (size as f64 * cfg.pi).round() as usize,
    };
    let pos = sample_mvn(&cfg.mu_target_pos, k, rng);
    let neg = sample_mvn(&cfg.mu_target_neg, size - k, rng);
    let mut data = pos.into_vec();
    data.extend(neg.into_vec());
    let mut labels = vec![1u8; k];
    labels.resize(size, 0);
    (
        Matrix::from_vec(size, cfg.p, data).expect("sizes match"),
        labels,
    )
}

pub fn generate_pu<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<PuSample> {
    cfg.validate()?;
    let source = sample_mvn(&cfg.mu_source, cfg.n, rng);
    let (target, target_labels) = mixture(cfg, cfg.m, rng);
    let (validation_x, validation_y) = mixture(cfg, cfg.validation_size, rng);
    Ok(PuSample {
        dataset: Dataset::new(source, target)?,
        target_labels,
        validation_x,
        validation_y,
    })
}

/// Counter-based stream for one replicate.
pub fn replicate_rng(master_seed: u64, cell: usize, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((cell as u64) << 32) | replicate as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// SCAR goodness-of-fit test.
    Test,
    /// DETM and SETM point estimates of π.
    Estimate,
    /// ELR interval coverage under DETM and SETM.
    Coverage,
    /// Validation accuracy of the fitted and the true classifier.
    Classify,
    /// Mean absolute posterior error over the validation sample.
    Posterior,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Test => "test",
            Task::Estimate => "estimate",
            Task::Coverage => "coverage",
            Task::Classify => "classify",
            Task::Posterior => "posterior",
        }
    }
}

/// One cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub scenario: ScenarioConfig,
    pub tasks: Vec<Task>,
    pub replicates: usize,
    /// Confidence level for the coverage task.
    pub level: f64,
}

impl Cell {
    pub fn new(
        name: impl Into<String>,
        scenario: ScenarioConfig,
        tasks: &[Task],
        replicates: usize,
    ) -> Self {
        Self {
            name: name.into(),
            scenario,
            tasks: tasks.to_vec(),
            replicates,
            level: 0.95,
        }
    }

    fn has(&self, t: Task) -> bool {
        self.tasks.contains(&t)
    }
}

/// Interval endpoints and whether they cover the true π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalOutcome {
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    pub open: bool,
}

/// Everything measured in one replicate; fields belong to the cell's tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_detm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi_setm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setm_at_boundary: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_detm: Option<IntervalOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_setm: Option<IntervalOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_detm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    #[serde(flatten)]
    pub measurements: Measurements,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs the cell's tasks on one simulated sample.
pub fn run_replicate(
    cell: &Cell,
    opts: &FitOptions,
    master_seed: u64,
    cell_index: usize,
    replicate: usize,
) -> ReplicateOutcome {
    let mut rng = replicate_rng(master_seed, cell_index, replicate);
    let result = generate_pu(&cell.scenario, &mut rng).and_then(|sample| {
        let opts = FitOptions {
            seed: rng.random(),
            ..opts.clone()
        };
        measure(cell, &sample, &opts)
    });
    match result {
        Ok(measurements) => ReplicateOutcome {
            replicate,
            measurements,
            error: None,
        },
        Err(e) => ReplicateOutcome {
            replicate,
            measurements: Measurements::default(),
            error: Some(e.to_string()),
        },
    }
}

fn interval(prof: &mut ProfileLikelihood<'_>, level: f64, truth: f64) -> Result<IntervalOutcome> {
    let ci = prof.confidence_interval(level, false)?;
    Ok(IntervalOutcome {
        lower: ci.lower.value,
        upper: ci.upper.value,
        covered: ci.contains(truth),
        open: ci.is_open(),
    })
}

fn measure(cell: &Cell, sample: &PuSample, opts: &FitOptions) -> Result<Measurements> {
    let ds = &sample.dataset;
    let truth = cell.scenario.true_theta();
    let mut out = Measurements::default();
    let needs_setm = cell.has(Task::Estimate) || cell.has(Task::Coverage);

    // every task uses the DETM fit
    let mut detm = fit(ds, &ModelSpec::detm(), opts)?;
    let mut setm = if needs_setm {
        Some(fit(ds, &ModelSpec::setm(), opts)?)
    } else {
        None
    };
    if cell.has(Task::Coverage) {
        // the profile search may improve on the unrestricted fit
        let mut prof = ProfileLikelihood::from_fit(ds, ModelKind::Detm, opts, detm);
        out.ci_detm = Some(interval(&mut prof, cell.level, truth.pi)?);
        detm = prof.into_full_fit();
        if let Some(fr) = setm.take() {
            let mut prof = ProfileLikelihood::from_fit(ds, ModelKind::Setm, opts, fr);
            out.ci_setm = Some(interval(&mut prof, cell.level, truth.pi)?);
            setm = Some(prof.into_full_fit());
        }
    }
    if let Some(fr) = &setm {
        out.pi_detm = Some(detm.theta.pi);
        out.pi_setm = Some(fr.theta.pi);
        out.setm_at_boundary = Some(fr.boundary);
    }
    if cell.has(Task::Classify) {
        let preds = predict(&detm.theta, &sample.validation_x, 0.5)?;
        out.accuracy_detm = Some(accuracy(&preds, &sample.validation_y)?);
        let oracle = predict(&truth, &sample.validation_x, 0.5)?;
        out.accuracy_oracle = Some(accuracy(&oracle, &sample.validation_y)?);
    }
    if cell.has(Task::Posterior) {
        out.l1_distance = Some(l1_posterior_distance(
            &detm.theta,
            &truth,
            &sample.validation_x,
        )?);
    }
    if cell.has(Task::Test) {
        let t = gof_test_scar_from_fit(ds, detm, opts)?;
        out.statistic = Some(t.statistic);
        out.p_value = Some(t.p_value);
        out.reject = Some(t.reject_at_0_05);
    }
    Ok(out)
}

/// All replicates of a cell, in replicate order.
pub fn run_cell(
    cell: &Cell,
    opts: &FitOptions,
    master_seed: u64,
    cell_index: usize,
) -> Vec<ReplicateOutcome> {
    (0..cell.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cell, opts, master_seed, cell_index, r))
        .collect()
}

/// Summary statistics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub kind: ScenarioKind,
    pub tasks: Vec<Task>,
    pub p: usize,
    pub n: usize,
    pub m: usize,
    pub pi: f64,
    pub master_seed: u64,
    pub cell_index: usize,
    /// Replicate indices `0..replicates` on streams `(cell_index << 32) | r`.
    pub replicates: usize,
    pub failures: usize,
    pub metrics: BTreeMap<String, f64>,
    pub outcomes: Vec<ReplicateOutcome>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

fn rate(v: &[bool]) -> f64 {
    v.iter().filter(|b| **b).count() as f64 / v.len() as f64
}

pub fn summarize(
    cell: &Cell,
    master_seed: u64,
    cell_index: usize,
    outcomes: Vec<ReplicateOutcome>,
) -> CellSummary {
    let ok: Vec<&Measurements> = outcomes
        .iter()
        .filter(|o| o.error.is_none())
        .map(|o| &o.measurements)
        .collect();
    let truth = cell.scenario.pi;
    let mut metrics = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        metrics.insert(k.to_string(), v);
    };
    let floats = |f: fn(&Measurements) -> Option<f64>| -> Vec<f64> {
        ok.iter().filter_map(|m| f(m)).collect()
    };
    let flags = |f: fn(&Measurements) -> Option<bool>| -> Vec<bool> {
        ok.iter().filter_map(|m| f(m)).collect()
    };

    let rejects = flags(|m| m.reject);
    if !rejects.is_empty() {
        put("rejection_rate", rate(&rejects));
        put("statistic_mean", mean(&floats(|m| m.statistic)));
    }
    for (model, get) in [
        (
            "detm",
            (|m: &Measurements| m.pi_detm) as fn(&Measurements) -> Option<f64>,
        ),
        ("setm", |m: &Measurements| m.pi_setm),
    ] {
        let pis = floats(get);
        if !pis.is_empty() {
            put(&format!("{model}.pi_mean"), mean(&pis));
            put(&format!("{model}.pi_sd"), sd(&pis));
            put(
                &format!("{model}.pi_mse"),
                pis.iter().map(|p| (p - truth) * (p - truth)).sum::<f64>() / pis.len() as f64,
            );
        }
    }
    let boundary = flags(|m| m.setm_at_boundary);
    if !boundary.is_empty() {
        put("setm.boundary_rate", rate(&boundary));
    }
    for (model, get) in [
        (
            "detm",
            (|m: &Measurements| m.ci_detm) as fn(&Measurements) -> Option<IntervalOutcome>,
        ),
        ("setm", |m: &Measurements| m.ci_setm),
    ] {
        let cis: Vec<IntervalOutcome> = ok.iter().filter_map(|m| get(m)).collect();
        if !cis.is_empty() {
            put(
                &format!("{model}.coverage"),
                rate(&cis.iter().map(|c| c.covered).collect::<Vec<_>>()),
            );
            put(
                &format!("{model}.ci_width_mean"),
                mean(&cis.iter().map(|c| c.upper - c.lower).collect::<Vec<_>>()),
            );
            put(
                &format!("{model}.ci_open_rate"),
                rate(&cis.iter().map(|c| c.open).collect::<Vec<_>>()),
            );
        }
    }
    let acc = floats(|m| m.accuracy_detm);
    if !acc.is_empty() {
        put("detm.accuracy_mean", mean(&acc));
        put("detm.accuracy_median", median(&acc));
        put("oracle.accuracy_mean", mean(&floats(|m| m.accuracy_oracle)));
    }
    let l1 = floats(|m| m.l1_distance);
    if !l1.is_empty() {
        put("l1_mean", mean(&l1));
        put("l1_median", median(&l1));
    }
    CellSummary {
        name: cell.name.clone(),
        kind: cell.scenario.kind,
        tasks: cell.tasks.clone(),
        p: cell.scenario.p,
        n: cell.scenario.n,
        m: cell.scenario.m,
        pi: truth,
        master_seed,
        cell_index,
        replicates: cell.replicates,
        failures: outcomes.len() - ok.len(),
        metrics,
        outcomes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub cells: Vec<CellSummary>,
}

pub fn run_experiment(
    cells: &[Cell],
    opts: &FitOptions,
    master_seed: u64,
) -> Result<ExperimentReport> {
    if cells.is_empty() {
        return Err(Error::Config("no cells".into()));
    }
    for (k, c) in cells.iter().enumerate() {
        c.scenario
            .validate()
            .map_err(|e| Error::Config(format!("cells[{k}] ({}): {e}", c.name)))?;
        if c.replicates == 0 {
            return Err(Error::Config(format!(
                "cells[{k}] ({}): replicates must be at least 1",
                c.name
            )));
        }
        if c.tasks.is_empty() {
            return Err(Error::Config(format!("cells[{k}] ({}): no tasks", c.name)));
        }
    }
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(k, c)| summarize(c, master_seed, k, run_cell(c, opts, master_seed, k)))
        .collect();
    Ok(ExperimentReport {
        master_seed,
        cells: summaries,
    })
}

impl ExperimentReport {
    /// Long-format summary: one row per cell and metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,kind,tasks,p,n,m,pi,replicates,failures,metric,value\n");
        for c in &self.cells {
            let tasks: Vec<&str> = c.tasks.iter().map(|t| t.as_str()).collect();
            let prefix = format!(
                "{},{},{},{},{},{},{},{},{}",
                c.name,
                serde_json::to_value(c.kind)
                    .expect("enum")
                    .as_str()
                    .unwrap_or_default(),
                tasks.join(";"),
                c.p,
                c.n,
                c.m,
                crate::io::format_float(c.pi),
                c.replicates,
                c.failures
            );
            for (k, v) in &c.metrics {
                s.push_str(&format!("{prefix},{k},{}\n", crate::io::format_float(*v)));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
