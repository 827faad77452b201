//! TOML experiment files for `pudetm simulate`.
//!
//! ```toml
//! seed = 2024
//! replicates = 200
//!
//! [fit]
//! starts = 2
//!
//! [[cells]]
//! name = "null-n1000"
//! kind = "scar"
//! tasks = ["test"]
//! p = 15
//! n = 1000
//! pi = 0.75
//! mu_target_neg = "ones(15)"
//! ```
//!
//! Mean vectors are arrays of numbers or comma-separated text mixing numbers
//! with `ones(k)` and `zeros(k)`, e.g. `"ones(7), zeros(8)"`. Unset means
//! default to the source at zero and negatives at one; `m` and
//! `validation_size` default to `n`.

use pudetm_core::{FitOptions, LabelRule};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::simulate::{Cell, PositiveCount, ScenarioConfig, ScenarioKind, Task};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum VectorSpec {
    List(Vec<f64>),
    Text(String),
}

/// Expands a shorthand vector such as `"ones(7), zeros(8)"` or `"1, 0.5"`.
pub fn parse_vector(text: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim) {
        let repeat = |inner: &str, v: f64, out: &mut Vec<f64>| -> std::result::Result<(), String> {
            let k: usize = inner
                .trim()
                .parse()
                .map_err(|_| format!("bad count in `{part}`"))?;
            out.extend(std::iter::repeat_n(v, k));
            Ok(())
        };
        if let Some(inner) = part.strip_prefix("ones(").and_then(|r| r.strip_suffix(')')) {
            repeat(inner, 1.0, &mut out)?;
        } else if let Some(inner) = part
            .strip_prefix("zeros(")
            .and_then(|r| r.strip_suffix(')'))
        {
            repeat(inner, 0.0, &mut out)?;
        } else {
            let v: f64 = part
                .parse()
                .map_err(|_| format!("`{part}` is not a number, ones(k) or zeros(k)"))?;
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitSection {
    starts: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    label_rule: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellSection {
    name: Option<String>,
    kind: ScenarioKind,
    task: Option<Task>,
    tasks: Option<Vec<Task>>,
    p: usize,
    n: usize,
    m: Option<usize>,
    pi: f64,
    mu_source: Option<VectorSpec>,
    mu_target_pos: Option<VectorSpec>,
    mu_target_neg: Option<VectorSpec>,
    validation_size: Option<usize>,
    positives: Option<PositiveCount>,
    level: Option<f64>,
    replicates: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    seed: Option<u64>,
    replicates: Option<usize>,
    #[serde(default)]
    fit: FitSection,
    #[serde(default)]
    cells: Vec<CellSection>,
}

/// A parsed experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub seed: u64,
    pub fit: FitOptions,
    pub cells: Vec<Cell>,
}

fn vector(spec: Option<&VectorSpec>, default: Vec<f64>, field: &str) -> Result<Vec<f64>> {
    match spec {
        None => Ok(default),
        Some(VectorSpec::List(v)) => Ok(v.clone()),
        Some(VectorSpec::Text(t)) => {
            parse_vector(t).map_err(|e| Error::Config(format!("{field}: {e}")))
        }
    }
}

impl Experiment {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ExperimentFile =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if file.cells.is_empty() {
            return Err(Error::Config("no cells".into()));
        }
        let defaults = FitOptions::default();
        let label_rule = match &file.fit.label_rule {
            Some(r) => r
                .parse::<LabelRule>()
                .map_err(|e| Error::Config(format!("fit.label_rule: {e}")))?,
            None => defaults.label_rule,
        };
        let fit = FitOptions {
            n_starts: file.fit.starts.unwrap_or(defaults.n_starts),
            tol: file.fit.tol.unwrap_or(defaults.tol),
            max_em_iter: file.fit.max_iter.unwrap_or(defaults.max_em_iter),
            label_rule,
            ..defaults
        };
        fit.validate()
            .map_err(|e| Error::Config(format!("fit: {e}")))?;
        let default_reps = file.replicates.unwrap_or(200);
        let mut cells = Vec::with_capacity(file.cells.len());
        for (k, c) in file.cells.iter().enumerate() {
            let at = |field: &str| format!("cells[{k}].{field}");
            let tasks = match (&c.task, &c.tasks) {
                (Some(t), None) => vec![*t],
                (None, Some(ts)) if !ts.is_empty() => ts.clone(),
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!(
                        "cells[{k}]: give `task` or `tasks`, not both"
                    )))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{}: at least one task is required",
                        at("tasks")
                    )))
                }
            };
            let mu_source = vector(c.mu_source.as_ref(), vec![0.0; c.p], &at("mu_source"))?;
            let default_pos = match c.kind {
                ScenarioKind::Scar => mu_source.clone(),
                _ => {
                    if c.mu_target_pos.is_none() {
                        return Err(Error::Config(format!(
                            "{}: required unless kind = \"scar\"",
                            at("mu_target_pos")
                        )));
                    }
                    Vec::new()
                }
            };
            let scenario = ScenarioConfig {
                kind: c.kind,
                p: c.p,
                mu_target_pos: vector(c.mu_target_pos.as_ref(), default_pos, &at("mu_target_pos"))?,
                mu_target_neg: vector(
                    c.mu_target_neg.as_ref(),
                    vec![1.0; c.p],
                    &at("mu_target_neg"),
                )?,
                mu_source,
                pi: c.pi,
                n: c.n,
                m: c.m.unwrap_or(c.n),
                validation_size: c.validation_size.unwrap_or(c.n),
                positives: c.positives.unwrap_or_default(),
            };
            let name = c.name.clone().unwrap_or_else(|| format!("cell{k}"));
            scenario
                .validate()
                .map_err(|e| Error::Config(format!("cells[{k}] ({name}): {}", strip_config(&e))))?;
            let level = c.level.unwrap_or(0.95);
            if !(0.5..1.0).contains(&level) {
                return Err(Error::Config(format!(
                    "{}: {level} must lie in [0.5, 1)",
                    at("level")
                )));
            }
            let replicates = c.replicates.unwrap_or(default_reps);
            if replicates == 0 {
                return Err(Error::Config(format!(
                    "{}: must be at least 1",
                    at("replicates")
                )));
            }
            cells.push(Cell {
                name,
                scenario,
                tasks,
                replicates,
                level,
            });
        }
        Ok(Self {
            seed: file.seed.unwrap_or(0),
            fit,
            cells,
        })
    }
}

fn strip_config(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
