//! Datasets, model parameters and feature maps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::numerics::{dot, pivoted_qr_rank, Matrix};

/// Relative tolerance on `|R_kk|` used by the rank diagnostic.
pub const RANK_TOL: f64 = 1e-10;

/// Pooled positive-unlabeled sample.
///
/// Rows `0..n` are the labeled source positives, rows `n..n+m` the unlabeled
/// target sample. Empirical-likelihood weights are indexed the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    n: usize,
}

impl Dataset {
    pub fn new(source: Matrix, target: Matrix) -> Result<Self> {
        if source.nrows() == 0 {
            return Err(Error::data("source sample has no rows"));
        }
        if target.nrows() == 0 {
            return Err(Error::data("target sample has no rows"));
        }
        let p = source.ncols();
        if p == 0 {
            return Err(Error::data("no feature columns"));
        }
        if target.ncols() != p {
            return Err(Error::data(format!(
                "source has {p} columns but target has {}",
                target.ncols()
            )));
        }
        let n = source.nrows();
        let mut data = source.into_vec();
        data.extend_from_slice(target.as_slice());
        let rows = data.len() / p;
        let x = Matrix::from_vec(rows, p, data)?;
        if let Some(pos) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value at row {}, column {}",
                pos / p,
                pos % p
            )));
        }
        Ok(Self { x, n })
    }

    pub fn from_rows<R: AsRef<[f64]>>(source: &[R], target: &[R]) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::data("source sample has no rows"));
        }
        if target.is_empty() {
            return Err(Error::data("target sample has no rows"));
        }
        Self::new(Matrix::from_rows(source)?, Matrix::from_rows(target)?)
    }

    /// Source sample size.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Target sample size.
    pub fn m(&self) -> usize {
        self.x.nrows() - self.n
    }

    /// Feature dimension.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Pooled size `N = n + m`.
    pub fn total(&self) -> usize {
        self.x.nrows()
    }

    /// Target fraction `m / N`.
    pub fn target_fraction(&self) -> f64 {
        self.m() as f64 / self.total() as f64
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn is_source(&self, i: usize) -> bool {
        i < self.n
    }

    pub fn source_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.x.rows().take(self.n)
    }

    pub fn target_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.rows().skip(self.n)
    }

    pub fn source_matrix(&self) -> Matrix {
        let p = self.p();
        Matrix::from_vec(self.n, p, self.x.as_slice()[..self.n * p].to_vec())
            .expect("source block shape")
    }

    pub fn target_matrix(&self) -> Matrix {
        let p = self.p();
        Matrix::from_vec(self.m(), p, self.x.as_slice()[self.n * p..].to_vec())
            .expect("target block shape")
    }
}

/// Structural parameters of the double exponential tilting model.
///
/// Component 1 is the target-positive class with log density ratio
/// `alpha1 + x·beta1` against the source positives, component 2 the
/// target-negative class; `pi` is the positive proportion in the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub pi: f64,
}

impl Theta {
    pub fn new(
        alpha1: f64,
        alpha2: f64,
        beta1: Vec<f64>,
        beta2: Vec<f64>,
        pi: f64,
    ) -> Result<Self> {
        let t = Self {
            alpha1,
            alpha2,
            beta1,
            beta2,
            pi,
        };
        t.validate()?;
        Ok(t)
    }

    /// Both components equal to the source distribution.
    pub fn null(p: usize, pi: f64) -> Self {
        Self {
            alpha1: 0.0,
            alpha2: 0.0,
            beta1: alloc::vec![0.0; p],
            beta2: alloc::vec![0.0; p],
            pi,
        }
    }

    pub fn p(&self) -> usize {
        self.beta1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta1.len() != self.beta2.len() {
            return Err(Error::data("beta1 and beta2 differ in length"));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::domain(format!("pi = {} is outside (0, 1)", self.pi)));
        }
        let finite = self.alpha1.is_finite()
            && self.alpha2.is_finite()
            && self.beta1.iter().chain(&self.beta2).all(|v| v.is_finite());
        if !finite {
            return Err(Error::data("theta has non-finite entries"));
        }
        Ok(())
    }

    /// Exchanges the two components and maps `pi` to `1 - pi`.
    pub fn switched(&self) -> Self {
        Self {
            alpha1: self.alpha2,
            alpha2: self.alpha1,
            beta1: self.beta2.clone(),
            beta2: self.beta1.clone(),
            pi: 1.0 - self.pi,
        }
    }

    /// `alpha1 + x·beta1`.
    pub fn log_ratio1(&self, x: &[f64]) -> f64 {
        self.alpha1 + dot(x, &self.beta1)
    }

    /// `alpha2 + x·beta2`.
    pub fn log_ratio2(&self, x: &[f64]) -> f64 {
        self.alpha2 + dot(x, &self.beta2)
    }

    /// `log{pi·exp(eta1) + (1-pi)·exp(eta2)}` for given tilts.
    pub fn log_mixture_from_tilts(&self, eta1: f64, eta2: f64) -> f64 {
        // exact zero when the tilts coincide at zero
        if eta1 >= eta2 {
            eta1 + ((1.0 - self.pi) * (eta2 - eta1).exp_m1()).ln_1p()
        } else {
            eta2 + (self.pi * (eta1 - eta2).exp_m1()).ln_1p()
        }
    }

    pub fn log_mixture(&self, x: &[f64]) -> f64 {
        self.log_mixture_from_tilts(self.log_ratio1(x), self.log_ratio2(x))
    }

    pub(crate) fn max_abs_diff(&self, other: &Theta) -> f64 {
        let mut d = (self.alpha1 - other.alpha1)
            .abs()
            .max((self.alpha2 - other.alpha2).abs())
            .max((self.pi - other.pi).abs());
        for (a, b) in self.beta1.iter().zip(&other.beta1) {
            d = d.max((a - b).abs());
        }
        for (a, b) in self.beta2.iter().zip(&other.beta2) {
            d = d.max((a - b).abs());
        }
        d
    }
}

/// Result of [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Numerical rank of the pooled design with rows `(1, x_i)`.
    pub rank: usize,
    pub full_rank: bool,
    /// Pooled per-column sample variance.
    pub column_variance: Vec<f64>,
}

impl Diagnostics {
    /// Converts a rank-deficient report into a data error.
    pub fn require_full_rank(&self) -> Result<()> {
        if self.full_rank {
            Ok(())
        } else {
            Err(Error::data(format!(
                "design (1, x) has rank {} < {}; a feature is constant or collinear",
                self.rank,
                self.p + 1
            )))
        }
    }
}

/// Checks counts, finiteness and the rank of the pooled `(1, x)` design.
pub fn validate_dataset(ds: &Dataset) -> Result<Diagnostics> {
    if ds.n() == 0 || ds.m() == 0 {
        return Err(Error::data("both samples need at least one row"));
    }
    if ds.features().as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite feature value"));
    }
    let p = ds.p();
    let total = ds.total();
    let mut design = Matrix::zeros(total, p + 1);
    for (i, row) in ds.features().rows().enumerate() {
        design[(i, 0)] = 1.0;
        design.row_mut(i)[1..].copy_from_slice(row);
    }
    let rank = pivoted_qr_rank(&design, RANK_TOL);
    let mut column_variance = Vec::with_capacity(p);
    for j in 0..p {
        let mean = ds.features().rows().map(|r| r[j]).sum::<f64>() / total as f64;
        let ss: f64 = ds.features().rows().map(|r| (r[j] - mean).powi(2)).sum();
        column_variance.push(if total > 1 {
            ss / (total - 1) as f64
        } else {
            0.0
        });
    }
    Ok(Diagnostics {
        n: ds.n(),
        m: ds.m(),
        p,
        rank,
        full_rank: rank == p + 1,
        column_variance,
    })
}

/// A derived feature built from the raw columns.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnExpr {
    /// `x_i`
    Column(usize),
    /// `x_i^k`
    Power(usize, i32),
    /// `x_i * x_j`
    Product(usize, usize),
    /// `ln(x_i)`
    Log(usize),
}

impl ColumnExpr {
    fn max_column(&self) -> usize {
        match *self {
            ColumnExpr::Column(i) | ColumnExpr::Power(i, _) | ColumnExpr::Log(i) => i,
            ColumnExpr::Product(i, j) => i.max(j),
        }
    }

    fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            ColumnExpr::Column(i) => row[i],
            ColumnExpr::Power(i, k) => row[i].powi(k),
            ColumnExpr::Product(i, j) => row[i] * row[j],
            ColumnExpr::Log(i) => row[i].ln(),
        }
    }
}

fn parse_column_index(s: &str) -> Result<usize> {
    s.trim()
        .strip_prefix('x')
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::config(format!("bad column reference `{s}`; expected x<index>")))
}

impl FromStr for ColumnExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("log(").and_then(|r| r.strip_suffix(')')) {
            return Ok(ColumnExpr::Log(parse_column_index(inner)?));
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(ColumnExpr::Product(
                parse_column_index(a)?,
                parse_column_index(b)?,
            ));
        }
        if let Some((a, k)) = s.split_once('^') {
            let k: i32 = k
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad exponent in `{s}`")))?;
            return Ok(ColumnExpr::Power(parse_column_index(a)?, k));
        }
        Ok(ColumnExpr::Column(parse_column_index(s)?))
    }
}

impl fmt::Display for ColumnExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ColumnExpr::Column(i) => write!(f, "x{i}"),
            ColumnExpr::Power(i, k) => write!(f, "x{i}^{k}"),
            ColumnExpr::Product(i, j) => write!(f, "x{i}*x{j}"),
            ColumnExpr::Log(i) => write!(f, "log(x{i})"),
        }
    }
}

/// Known transform `T(x)` substituted for `x` in both tilts.
///
/// Text form: `identity`, `poly:<degree>` or `cols:<expr>,<expr>,...` with
/// expressions `x3`, `x0^2`, `x1*x2`, `log(x4)` (zero-based columns).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FeatureMap {
    #[default]
    Identity,
    /// Per-column powers `x, x^2, ..., x^d`, grouped by column.
    Polynomial(u32),
    Columns(Vec<ColumnExpr>),
}

impl FeatureMap {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            FeatureMap::Identity => Ok(()),
            FeatureMap::Polynomial(d) if *d < 1 => {
                Err(Error::config("polynomial degree must be at least 1"))
            }
            FeatureMap::Polynomial(_) => Ok(()),
            FeatureMap::Columns(exprs) => {
                if exprs.is_empty() {
                    return Err(Error::config("column feature map is empty"));
                }
                match exprs.iter().find(|e| e.max_column() >= p) {
                    Some(e) => Err(Error::config(format!(
                        "`{e}` refers past the {p} input columns"
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    pub fn output_dim(&self, p: usize) -> usize {
        match self {
            FeatureMap::Identity => p,
            FeatureMap::Polynomial(d) => p * *d as usize,
            FeatureMap::Columns(exprs) => exprs.len(),
        }
    }

    /// Transforms a single row; fails on non-finite output.
    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.validate(row.len())?;
        let out: Vec<f64> = match self {
            FeatureMap::Identity => row.to_vec(),
            FeatureMap::Polynomial(d) => row
                .iter()
                .flat_map(|&v| (1..=*d as i32).map(move |k| v.powi(k)))
                .collect(),
            FeatureMap::Columns(exprs) => exprs.iter().map(|e| e.eval(row)).collect(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("feature map produced a non-finite value"));
        }
        Ok(out)
    }

    pub fn apply_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if matches!(self, FeatureMap::Identity) {
            return Ok(x.clone());
        }
        self.validate(x.ncols())?;
        let q = self.output_dim(x.ncols());
        let mut data = Vec::with_capacity(x.nrows() * q);
        for (i, row) in x.rows().enumerate() {
            let mapped = self
                .apply_row(row)
                .map_err(|e| Error::data(format!("row {i}: {e}")))?;
            data.extend(mapped);
        }
        Matrix::from_vec(x.nrows(), q, data)
    }
}

impl FromStr for FeatureMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(FeatureMap::Identity);
        }
        if let Some(d) = s.strip_prefix("poly:") {
            let d: u32 = d
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad polynomial degree in `{s}`")))?;
            if d < 1 {
                return Err(Error::config("polynomial degree must be at least 1"));
            }
            return Ok(FeatureMap::Polynomial(d));
        }
        if let Some(list) = s.strip_prefix("cols:") {
            let exprs = list
                .split(',')
                .map(ColumnExpr::from_str)
                .collect::<Result<Vec<_>>>()?;
            return Ok(FeatureMap::Columns(exprs));
        }
        Err(Error::config(format!(
            "unknown feature map `{s}`; expected identity, poly:<d> or cols:<list>"
        )))
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => f.write_str("identity"),
            FeatureMap::Polynomial(d) => write!(f, "poly:{d}"),
            FeatureMap::Columns(exprs) => {
                let parts: Vec<String> = exprs.iter().map(|e| e.to_string()).collect();
                write!(f, "cols:{}", parts.join(","))
            }
        }
    }
}

/// Applies `fm` to both samples.
pub fn apply_feature_map(ds: &Dataset, fm: &FeatureMap) -> Result<Dataset> {
    fm.validate(ds.p())?;
    if matches!(fm, FeatureMap::Identity) {
        return Ok(ds.clone());
    }
    Dataset::new(
        fm.apply_matrix(&ds.source_matrix())?,
        fm.apply_matrix(&ds.target_matrix())?,
    )
}
