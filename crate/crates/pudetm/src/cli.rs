//! The `pudetm` command-line tool.
//!
//! Results go to stdout (or `--out`), errors to stderr as one JSON object.
//! Exit status is 0 on success, 2 for input or configuration errors and 3
//! for numerical failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pudetm_core::{
    chi2_quantile, fit, gof_test_scar, predict, CurvePoint, FeatureMap, FitOptions, FitResult,
    LabelRule, ModelKind, ModelSpec, ProfileLikelihood,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Experiment;
use crate::error::{Error, Result};
use crate::io::{format_float, read_table_path, Table};
use crate::model::{ModelFile, Preprocess};
use crate::simulate::run_experiment;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "PUDETM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "pudetm",
    version,
    about = "Positive-unlabeled learning with the double exponential tilting model"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for random starts and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: $PUDETM_THREADS, else all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// EM stopping tolerance on the log-EL increment.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Number of EM starts.
    #[arg(long, global = true)]
    pub starts: Option<usize>,
    /// Label orientation rule: kl_rule, pi_less_half or none.
    #[arg(long, global = true)]
    pub label_rule: Option<String>,
    /// Feature transform: identity, poly:<d> or cols:<expr>,...
    #[arg(long, global = true)]
    pub feature_map: Option<String>,
    /// Centre and scale mapped features with pooled statistics before fitting.
    #[arg(long, global = true)]
    pub standardize: bool,
    /// Format of the main result.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub output: OutputFormat,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Detm,
    Setm,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Detm => ModelKind::Detm,
            ModelArg::Setm => ModelKind::Setm,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the DETM or SETM and print the model.
    Fit {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelArg::Detm)]
        model: ModelArg,
        /// Hold π at this value.
        #[arg(long)]
        fixed_pi: Option<f64>,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test SCAR (SETM) against the DETM.
    TestScar {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ELR confidence interval for π.
    CiPi {
        input: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, value_enum, default_value_t = ModelArg::Detm)]
        model: ModelArg,
        /// Write the profile R*(π) over `--grid` to this CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Grid for `--curve` as start:stop:step.
        #[arg(long, default_value = "0.01:0.99:0.01")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior probabilities and labels for new rows.
    Predict {
        /// Model JSON written by `fit`.
        #[arg(long = "model-file")]
        model_file: PathBuf,
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo experiment described by a TOML file.
    Simulate {
        config: PathBuf,
        /// Directory for report.csv and report.json.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Override the replicate count of every cell.
        #[arg(long)]
        replicates: Option<usize>,
    },
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let body = json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{body}");
            e.exit_code()
        }
    }
}

fn threads(global: &GlobalArgs) -> Result<Option<usize>> {
    if let Some(t) = global.threads {
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV} = `{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn fit_options(global: &GlobalArgs, base: FitOptions) -> Result<FitOptions> {
    let mut opts = base;
    if let Some(s) = global.seed {
        opts.seed = s;
    }
    if let Some(t) = global.tol {
        opts.tol = t;
    }
    if let Some(s) = global.starts {
        opts.n_starts = s;
    }
    if let Some(r) = &global.label_rule {
        opts.label_rule = r.parse::<LabelRule>()?;
    }
    opts.validate()?;
    Ok(opts)
}

fn feature_map(global: &GlobalArgs) -> Result<FeatureMap> {
    Ok(match &global.feature_map {
        Some(s) => s.parse()?,
        None => FeatureMap::Identity,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    // everything below depends on validated flags
    let opts = fit_options(g, FitOptions::default())?;
    let fm = feature_map(g)?;
    let threads = threads(g)?;
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit {
            input,
            model,
            fixed_pi,
            out,
        } => cmd_fit(g, &opts, fm, input, *model, *fixed_pi, out.as_deref()),
        Command::TestScar { input, out } => cmd_test_scar(g, &opts, fm, input, out.as_deref()),
        Command::CiPi {
            input,
            level,
            model,
            curve,
            grid,
            out,
        } => cmd_ci_pi(
            g,
            &opts,
            fm,
            input,
            *level,
            *model,
            curve.as_deref(),
            grid,
            out.as_deref(),
        ),
        Command::Predict {
            model_file,
            input,
            threshold,
            out,
        } => cmd_predict(model_file, input, *threshold, out.as_deref()),
        Command::Simulate {
            config,
            out_dir,
            replicates,
        } => cmd_simulate(g, config, out_dir, *replicates),
    })
}

fn load(
    input: &Path,
    fm: FeatureMap,
    standardize: bool,
) -> Result<(Table, pudetm_core::Dataset, Preprocess)> {
    let table = read_table_path(input)?;
    let raw = table.to_dataset()?;
    let (ds, pre) = Preprocess::fit(&raw, fm, standardize)?;
    Ok((table, ds, pre))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// JSON, or a `key,value` CSV of the scalar fields.
fn render(value: &Value, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(value).expect("value serializes") + "\n",
        OutputFormat::Csv => {
            let mut s = String::from("key,value\n");
            flatten("", value, &mut s);
            s
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut String) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&key(&i.to_string()), v, out);
            }
        }
        Value::Number(n) => {
            let text = n
                .as_f64()
                .map(format_float)
                .unwrap_or_else(|| n.to_string());
            out.push_str(&format!("{prefix},{text}\n"));
        }
        Value::Null => out.push_str(&format!("{prefix},\n")),
        Value::String(s) => out.push_str(&format!("{prefix},{s}\n")),
        Value::Bool(b) => out.push_str(&format!("{prefix},{b}\n")),
    }
}

#[derive(Serialize)]
struct TraceSummary {
    length: usize,
    first: Option<f64>,
    last: Option<f64>,
    min_increment: Option<f64>,
}

fn trace_summary(trace: &[f64]) -> TraceSummary {
    TraceSummary {
        length: trace.len(),
        first: trace.first().copied(),
        last: trace.last().copied(),
        min_increment: trace.windows(2).map(|w| w[1] - w[0]).reduce(f64::min),
    }
}

fn fit_json(fr: &FitResult, pre: &Preprocess, table: &Table, ds: &pudetm_core::Dataset) -> Value {
    let mut v = serde_json::to_value(ModelFile::new(fr, pre, &table.feature_names))
        .expect("model serializes");
    let extra = json!({
        "n": ds.n(),
        "m": ds.m(),
        "log_el": fr.log_el,
        "converged": fr.converged,
        "n_iterations": fr.n_iterations,
        "trace": trace_summary(&fr.trace),
        "label_rule": fr.label_rule.as_str(),
        "label_switch": fr.label_switch.as_str(),
        "boundary": fr.boundary,
        "degenerate": fr.degenerate,
        "start_index": fr.start_index,
        "failed_starts": fr.failed_starts,
    });
    let obj = v.as_object_mut().expect("object");
    for (k, x) in extra.as_object().expect("object") {
        obj.insert(k.clone(), x.clone());
    }
    v
}

fn note(g: &GlobalArgs, msg: &str) {
    if !g.quiet {
        eprintln!("{msg}");
    }
}

fn cmd_fit(
    g: &GlobalArgs,
    opts: &FitOptions,
    fm: FeatureMap,
    input: &Path,
    model: ModelArg,
    fixed_pi: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let (table, ds, pre) = load(input, fm, g.standardize)?;
    let spec = ModelSpec {
        kind: model.into(),
        fixed_pi,
    };
    let fr = fit(&ds, &spec, opts)?;
    if fr.degenerate {
        note(
            g,
            "warning: a tilt is diverging; part of the target sample is separable from the source sample",
        );
    } else if !fr.converged {
        note(g, "warning: EM reached the iteration limit");
    }
    emit(out, &render(&fit_json(&fr, &pre, &table, &ds), g.output))
}

fn cmd_test_scar(
    g: &GlobalArgs,
    opts: &FitOptions,
    fm: FeatureMap,
    input: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let (_, ds, _) = load(input, fm, g.standardize)?;
    let t = gof_test_scar(&ds, opts)?;
    let v = json!({
        "statistic": t.statistic,
        "raw_statistic": t.raw_statistic,
        "df": t.df,
        "p_value": t.p_value,
        "critical_value": chi2_quantile(0.95, t.df)?,
        "decision": if t.reject_at_0_05 { "reject" } else { "retain" },
        "reject_at_0_05": t.reject_at_0_05,
        "pi_detm": t.fit_full.theta.pi,
        "pi_setm": t.fit_null.theta.pi,
        "profile_log_el_detm": t.fit_full.profile_log_el,
        "profile_log_el_setm": t.fit_null.profile_log_el,
        "converged": t.fit_full.converged && t.fit_null.converged,
    });
    emit(out, &render(&v, g.output))
}

/// Parses `start:stop:step` into grid points in (0, 1).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::Config(format!(
            "--grid `{text}`: expected start:stop:step inside (0, 1)"
        ))
    };
    let parts: Vec<f64> = text
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(start > 0.0 && stop < 1.0 && start <= stop && step > 0.0) {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // rounding keeps printed grid points free of accumulation noise
    Ok((0..count)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ci_pi(
    g: &GlobalArgs,
    opts: &FitOptions,
    fm: FeatureMap,
    input: &Path,
    level: f64,
    model: ModelArg,
    curve: Option<&Path>,
    grid: &str,
    out: Option<&Path>,
) -> Result<()> {
    let grid = curve.map(|_| parse_grid(grid)).transpose()?;
    let (_, ds, _) = load(input, fm, g.standardize)?;
    let mut prof = ProfileLikelihood::new(&ds, model.into(), opts)?;
    let ci = prof.confidence_interval(level, false)?;
    let mut warnings = Vec::new();
    if ci.lower.open {
        warnings.push(format!("no lower crossing above pi = {}", ci.lower.value));
    }
    if ci.upper.open {
        warnings.push(format!("no upper crossing below pi = {}", ci.upper.value));
    }
    if let (Some(path), Some(grid)) = (curve, grid) {
        let points = prof.curve(&grid);
        let failed = points.iter().filter(|p| p.elr.is_err()).count();
        if failed > 0 {
            warnings.push(format!(
                "{failed} curve points failed and are written as NaN"
            ));
        }
        fs::write(path, curve_csv(&points)).map_err(|e| Error::io(path, e))?;
    }
    let v = json!({
        "model": match model { ModelArg::Detm => "detm", ModelArg::Setm => "setm" },
        "level": level,
        "threshold": ci.threshold,
        "pi_hat": prof.pi_hat(),
        "lower": ci.lower.value,
        "upper": ci.upper.value,
        "lower_elr": ci.lower.elr,
        "upper_elr": ci.upper.elr,
        "lower_open": ci.lower.open,
        "upper_open": ci.upper.open,
        "warning": if warnings.is_empty() { Value::Null } else { Value::String(warnings.join("; ")) },
    });
    for w in &warnings {
        note(g, &format!("warning: {w}"));
    }
    emit(out, &render(&v, g.output))
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("pi,elr\n");
    for p in points {
        let v = p.elr.as_ref().map_or(f64::NAN, |v| *v);
        s.push_str(&format!("{},{}\n", format_float(p.pi), format_float(v)));
    }
    s
}

fn cmd_predict(model_file: &Path, input: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    let model = ModelFile::read(model_file)?;
    let theta = model.theta()?;
    let pre = model.preprocess()?;
    let table = read_table_path(input)?;
    if !model.input_features.is_empty() && model.input_features != table.feature_names {
        return Err(pudetm_core::Error::Data(format!(
            "input columns {:?} do not match the model's {:?}",
            table.feature_names, model.input_features
        ))
        .into());
    }
    let x = pre.apply(&table.features)?;
    let preds = predict(&theta, &x, threshold)?;
    let mut s = String::from("row_id,phi,label\n");
    for (i, p) in preds.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", format_float(p.phi), p.label));
    }
    emit(out, &s)
}

fn cmd_simulate(
    g: &GlobalArgs,
    config: &Path,
    out_dir: &Path,
    replicates: Option<usize>,
) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut exp = Experiment::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", config.display())),
        other => other,
    })?;
    exp.fit = fit_options(g, exp.fit)?;
    let seed = g.seed.unwrap_or(exp.seed);
    if let Some(r) = replicates {
        if r == 0 {
            return Err(Error::Config("--replicates must be at least 1".into()));
        }
        exp.cells.iter_mut().for_each(|c| c.replicates = r);
    }
    note(
        g,
        &format!(
            "running {} cells on {} threads",
            exp.cells.len(),
            rayon::current_num_threads()
        ),
    );
    let report = run_experiment(&exp.cells, &exp.fit, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("report.csv");
    let json_path = out_dir.join("report.json");
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let failures: usize = report.cells.iter().map(|c| c.failures).sum();
    let v = json!({
        "cells": report.cells.len(),
        "failed_replicates": failures,
        "report_csv": csv_path.display().to_string(),
        "report_json": json_path.display().to_string(),
    });
    emit(None, &render(&v, g.output))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.1:0.3:0.1").unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[2] - 0.3).abs() < 1e-12);
        assert!(parse_grid("0:0.5:0.1").is_err());
        assert!(parse_grid("0.1:0.5").is_err());
        assert!(parse_grid("0.5:0.1:0.1").is_err());
    }

    #[test]
    fn csv_flattening() {
        let v = json!({"a": 1.5, "b": {"c": [true, null]}, "s": "x"});
        let s = render(&v, OutputFormat::Csv);
        assert_eq!(s, "key,value\na,1.5\nb.c.0,true\nb.c.1,\ns,x\n");
    }

    #[test]
    fn unknown_flags_fail() {
        assert!(Cli::try_parse_from(["pudetm", "fit", "x.csv", "--bogus"]).is_err());
        assert!(
            Cli::try_parse_from(["pudetm", "fit", "x.csv", "--seed", "3", "--model", "setm"])
                .is_ok()
        );
        assert!(Cli::try_parse_from(["pudetm", "--output", "xml", "fit", "x.csv"]).is_err());
    }

    #[test]
    fn curve_header() {
        let pts = vec![
            CurvePoint {
                pi: 0.5,
                elr: Ok(1.25),
            },
            CurvePoint {
                pi: 0.6,
                elr: Err(pudetm_core::Error::Feasibility("x".into())),
            },
        ];
        assert_eq!(curve_csv(&pts), "pi,elr\n0.5,1.25\n0.6,NaN\n");
    }
}
