//! Model JSON and the preprocessing stored alongside it.

use std::path::Path;

use pudetm_core::{apply_feature_map, Dataset, FeatureMap, FitResult, Matrix, Theta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = concat!("pudetm ", env!("CARGO_PKG_VERSION"));

/// Pooled centring and scaling applied after the feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Pooled mean and standard deviation of every column; constant columns
    /// keep scale 1.
    pub fn from_matrix(x: &Matrix) -> Self {
        let (rows, p) = (x.nrows() as f64, x.ncols());
        let mut mean = vec![0.0; p];
        for r in x.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / rows;
            }
        }
        let mut var = vec![0.0; p];
        for r in x.rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / rows;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Model(format!(
                "standardization expects {} columns, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.nrows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Feature map followed by optional standardization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Preprocess {
    pub feature_map: FeatureMap,
    pub standardization: Option<Standardization>,
}

impl Preprocess {
    /// Applies the map to `raw` and, if requested, standardizes the mapped
    /// features with pooled statistics.
    pub fn fit(
        raw: &Dataset,
        feature_map: FeatureMap,
        standardize: bool,
    ) -> Result<(Dataset, Self)> {
        let mapped = apply_feature_map(raw, &feature_map)?;
        if !standardize {
            return Ok((
                mapped,
                Self {
                    feature_map,
                    standardization: None,
                },
            ));
        }
        let st = Standardization::from_matrix(mapped.features());
        let ds = Dataset::new(
            st.apply(&mapped.source_matrix())?,
            st.apply(&mapped.target_matrix())?,
        )?;
        Ok((
            ds,
            Self {
                feature_map,
                standardization: Some(st),
            },
        ))
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        let mapped = self.feature_map.apply_matrix(raw)?;
        match &self.standardization {
            Some(st) => st.apply(&mapped),
            None => Ok(mapped),
        }
    }
}

/// Serialized fitted model, readable by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: String,
    /// Dimension of the tilts, after the feature map.
    pub p: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub pi: f64,
    pub feature_map: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    /// Raw input column names the model was fitted on.
    #[serde(default)]
    pub input_features: Vec<String>,
    pub profile_log_el: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub version: String,
}

impl ModelFile {
    pub fn new(fr: &FitResult, pre: &Preprocess, input_features: &[String]) -> Self {
        Self {
            model: fr.model.as_str().to_string(),
            p: fr.theta.p(),
            alpha1: fr.theta.alpha1,
            alpha2: fr.theta.alpha2,
            beta1: fr.theta.beta1.clone(),
            beta2: fr.theta.beta2.clone(),
            pi: fr.theta.pi,
            feature_map: pre.feature_map.to_string(),
            standardization: pre.standardization.clone(),
            input_features: input_features.to_vec(),
            profile_log_el: fr.profile_log_el,
            lambda1: fr.lambda.lambda1,
            lambda2: fr.lambda.lambda2,
            version: FORMAT_VERSION.to_string(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }

    pub fn theta(&self) -> Result<Theta> {
        if self.beta1.len() != self.p || self.beta2.len() != self.p {
            return Err(Error::Model(format!(
                "beta vectors must have length p = {}",
                self.p
            )));
        }
        Theta::new(
            self.alpha1,
            self.alpha2,
            self.beta1.clone(),
            self.beta2.clone(),
            self.pi,
        )
        .map_err(|e| Error::Model(e.to_string()))
    }

    pub fn preprocess(&self) -> Result<Preprocess> {
        let feature_map = self
            .feature_map
            .parse()
            .map_err(|e: pudetm_core::Error| Error::Model(e.to_string()))?;
        Ok(Preprocess {
            feature_map,
            standardization: self.standardization.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardization_centres_and_scales() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let st = Standardization::from_matrix(&x);
        assert_eq!(st.mean, [3.0, 5.0]);
        assert_eq!(st.scale[1], 1.0);
        let z = st.apply(&x).unwrap();
        let col: Vec<f64> = z.rows().map(|r| r[0]).collect();
        assert!((col.iter().sum::<f64>()).abs() < 1e-15);
        assert!((col.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preprocess_applies_map_then_scaling() {
        let src = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let tgt = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        let ds = Dataset::new(src, tgt).unwrap();
        let (out, pre) = Preprocess::fit(&ds, FeatureMap::Polynomial(2), true).unwrap();
        assert_eq!(out.p(), 2);
        let again = pre.apply(&ds.features().clone()).unwrap();
        assert_eq!(&again, out.features());
    }

    #[test]
    fn model_json_round_trip() {
        let m = ModelFile {
            model: "detm".into(),
            p: 1,
            alpha1: -0.1,
            alpha2: 0.1 + 0.2,
            beta1: vec![1.0 / 3.0],
            beta2: vec![-2.0],
            pi: 0.7,
            feature_map: "identity".into(),
            standardization: None,
            input_features: vec!["a".into()],
            profile_log_el: -1234.5678901234567,
            lambda1: 0.35,
            lambda2: 0.15,
            version: FORMAT_VERSION.into(),
        };
        let text = serde_json::to_string(&m).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.theta().unwrap().beta1[0], 1.0 / 3.0);
    }
}
