//! Synthetic generators, dataset ingestion and rescaling, and the built-in
//! k-NN predictor the simulation harness uses as its black box.
//!
//! All covariates live in `[0, 1]^d` once rescaled. Continuous and ordinal
//! columns are min-max rescaled with the bounds recorded at calibration
//! time; those same bounds are applied to test points, clamping anything
//! outside and flagging the clamp. Constant columns map to 0.5. Binary
//! columns map their two observed values onto `{0, 1}` so any split on them
//! lands at 1/2.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::conformal::validate_simplex;

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

/// Counter-based stream derivation: one 64-bit seed plus a stream index give
/// an independent, reproducible generator (parallel trials each own one).
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fold a seed and two indices into a fresh 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Column kind for rescaling purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Ordinal,
    Binary,
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<FeatureKind> {
        match s {
            "continuous" => Ok(FeatureKind::Continuous),
            "ordinal" => Ok(FeatureKind::Ordinal),
            "binary" => Ok(FeatureKind::Binary),
            other => Err(Error::Schema(format!("unknown feature kind '{other}'"))),
        }
    }
}

/// Rescaling record for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
    /// Lower rescaling bound (smaller observed value for binary columns).
    pub min: f64,
    /// Upper rescaling bound.
    pub max: f64,
}

impl FeatureMeta {
    fn is_constant(&self) -> bool {
        self.min == self.max
    }

    /// Rescale one raw value; the flag marks values clamped into `[0, 1]`.
    pub fn rescale(&self, v: f64) -> (f64, bool) {
        if self.is_constant() {
            return (0.5, false);
        }
        let t = (v - self.min) / (self.max - self.min);
        if (0.0..=1.0).contains(&t) {
            (t, false)
        } else {
            (t.clamp(0.0, 1.0), true)
        }
    }
}

/// Response column: real-valued or a label index.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseData {
    Real(Vec<f64>),
    Label(Vec<usize>),
}

impl ResponseData {
    pub fn len(&self) -> usize {
        match self {
            ResponseData::Real(v) => v.len(),
            ResponseData::Label(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real(&self) -> Option<&[f64]> {
        match self {
            ResponseData::Real(v) => Some(v),
            _ => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            ResponseData::Label(v) => Some(v),
            _ => None,
        }
    }
}

/// A loaded or generated dataset: raw and rescaled covariates plus whatever
/// the rows carried (responses, point predictions, probability vectors).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_raw: Vec<Vec<f64>>,
    pub rescaled: Vec<Vec<f64>>,
    pub feature_meta: Vec<FeatureMeta>,
    pub response: Option<ResponseData>,
    /// Point predictions accompanying each row, when a column supplies them.
    pub predictions: Option<Vec<f64>>,
    /// Probability vectors accompanying each row.
    pub prob_vectors: Option<Vec<Vec<f64>>>,
    pub label_names: Option<Vec<String>>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x_raw.len()
    }

    pub fn d(&self) -> usize {
        self.feature_meta.len()
    }

    /// Rescale an out-of-sample point with the recorded bounds; the flag is
    /// true when any coordinate was clamped.
    pub fn rescale_point(&self, raw: &[f64]) -> Result<(Vec<f64>, bool)> {
        if raw.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: raw.len(),
            });
        }
        let mut clamped = false;
        let out = raw
            .iter()
            .zip(&self.feature_meta)
            .map(|(&v, meta)| {
                let (t, c) = meta.rescale(v);
                clamped |= c;
                t
            })
            .collect();
        Ok((out, clamped))
    }
}

fn build_meta(
    x_raw: &[Vec<f64>],
    names: &[String],
    kinds: &[FeatureKind],
    warnings: &mut Vec<String>,
) -> Result<Vec<FeatureMeta>> {
    let d = names.len();
    let mut meta = Vec::with_capacity(d);
    for j in 0..d {
        let column: Vec<f64> = x_raw.iter().map(|row| row[j]).collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &column {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if kinds[j] == FeatureKind::Binary {
            let mut distinct: Vec<f64> = column.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() > 2 {
                return Err(Error::Schema(format!(
                    "binary column '{}' has {} distinct values",
                    names[j],
                    distinct.len()
                )));
            }
        }
        if lo == hi {
            warnings.push(format!(
                "column '{}' is constant ({lo}); rescaled to 0.5",
                names[j]
            ));
        }
        meta.push(FeatureMeta {
            name: names[j].clone(),
            kind: kinds[j],
            min: lo,
            max: hi,
        });
    }
    Ok(meta)
}

fn rescale_all(x_raw: &[Vec<f64>], meta: &[FeatureMeta]) -> Vec<Vec<f64>> {
    x_raw
        .iter()
        .map(|row| {
            row.iter()
                .zip(meta)
                .map(|(&v, m)| m.rescale(v).0)
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic regression generators
// ---------------------------------------------------------------------------

/// Keep draws away from the singular point x = 0 of both mean functions.
const X_FLOOR: f64 = 1e-12;

fn unit_meta() -> Vec<FeatureMeta> {
    vec![FeatureMeta {
        name: "x0".into(),
        kind: FeatureKind::Continuous,
        min: 0.0,
        max: 1.0,
    }]
}

/// Mean function of the first generator: `3 sin(4/x + 0.2) + 1.5`.
pub fn data1_mean(x: f64) -> f64 {
    3.0 * (4.0 / x + 0.2).sin() + 1.5
}

/// Conditional standard deviation of the first generator: `x` itself.
pub fn data1_sd(x: f64) -> f64 {
    x
}

/// Mean function of the second generator: `sin(x^-3)`.
pub fn data2_mean(x: f64) -> f64 {
    x.powi(-3).sin()
}

/// Conditional standard deviation of the second generator: constant 0.1.
pub fn data2_sd(_x: f64) -> f64 {
    0.1
}

fn generate_regression(
    n: usize,
    seed: u64,
    mean: fn(f64) -> f64,
    sd: fn(f64) -> f64,
) -> Dataset {
    let mut rng = derived_rng(seed, 0);
    let mut x_raw = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(X_FLOOR..1.0);
        let z: f64 = StandardNormal.sample(&mut rng);
        x_raw.push(vec![x]);
        y.push(mean(x) + sd(x) * z);
    }
    let meta = unit_meta();
    let rescaled = rescale_all(&x_raw, &meta);
    Dataset {
        x_raw,
        rescaled,
        feature_meta: meta,
        response: Some(ResponseData::Real(y)),
        predictions: None,
        prob_vectors: None,
        label_names: None,
        warnings: Vec::new(),
    }
}

/// Heteroskedastic noise: `X ~ U(0,1)`, `Y | X ~ N(3 sin(4/X + 0.2) + 1.5, X^2)`.
pub fn generate_data1(n: usize, seed: u64) -> Dataset {
    generate_regression(n, seed, data1_mean, data1_sd)
}

/// Rapidly oscillating mean: `X ~ U(0,1)`, `Y | X ~ N(sin(X^-3), 0.1^2)`.
pub fn generate_data2(n: usize, seed: u64) -> Dataset {
    generate_regression(n, seed, data2_mean, data2_sd)
}

// ---------------------------------------------------------------------------
// Synthetic classification generator
// ---------------------------------------------------------------------------

/// Spatial profile of model confidence for the classification generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DifficultyProfile {
    /// Same dominant-class mass everywhere: scores carry no spatial signal.
    Constant { dominant_mass: f64 },
    /// Sharp model on `[0, 0.5)`, diffuse on `[0.5, 1]`.
    TwoRegion { sharp_mass: f64, diffuse_mass: f64 },
}

impl Default for DifficultyProfile {
    fn default() -> DifficultyProfile {
        DifficultyProfile::TwoRegion {
            sharp_mass: 0.92,
            diffuse_mass: 0.52,
        }
    }
}

/// Geometric decay of the non-dominant label masses.
const TAIL_RATIO: f64 = 0.55;
/// Within-region drift of the dominant mass, so set sizes respond
/// continuously to threshold differences.
const REGION_SLOPE: f64 = 0.24;
/// How much sharper the truth is than the reported vector: the generator
/// emulates an underconfident model, which calibration can exploit and the
/// model's own mass cannot.
const TRUTH_BOOST: f64 = 0.30;

impl DifficultyProfile {
    fn dominant_mass_at(&self, x: f64) -> f64 {
        let p = match *self {
            DifficultyProfile::Constant { dominant_mass } => dominant_mass,
            DifficultyProfile::TwoRegion {
                sharp_mass,
                diffuse_mass,
            } => {
                if x < 0.5 {
                    sharp_mass - REGION_SLOPE * x
                } else {
                    diffuse_mass - REGION_SLOPE * (x - 0.5)
                }
            }
        };
        p.clamp(0.05, 0.995)
    }

    /// Probability vector reported by the emulated model at `x`: dominant
    /// label 0, geometric tail, exact unit sum.
    pub fn model_probs(&self, x: f64, num_labels: usize) -> Vec<f64> {
        probs_with_dominant(self.dominant_mass_at(x), num_labels)
    }

    /// Ground-truth label distribution at `x`: same shape, sharper peak.
    pub fn truth_probs(&self, x: f64, num_labels: usize) -> Vec<f64> {
        let p = (self.dominant_mass_at(x) + TRUTH_BOOST).min(0.995);
        probs_with_dominant(p, num_labels)
    }
}

fn probs_with_dominant(p: f64, num_labels: usize) -> Vec<f64> {
    assert!(num_labels >= 2);
    let mut weights = Vec::with_capacity(num_labels - 1);
    let mut w = 1.0;
    for _ in 0..num_labels - 1 {
        w *= TAIL_RATIO;
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    let mut probs = Vec::with_capacity(num_labels);
    probs.push(p);
    let mut acc = p;
    for (i, w) in weights.iter().enumerate() {
        if i + 2 == num_labels {
            probs.push(1.0 - acc); // force an exact unit sum
        } else {
            let q = (1.0 - p) * w / total;
            probs.push(q);
            acc += q;
        }
    }
    probs
}

/// Draw covariates, true labels, and model probability vectors with
/// spatially varying conformity-score behaviour.
pub fn generate_classification(
    n: usize,
    num_labels: usize,
    profile: DifficultyProfile,
    seed: u64,
) -> Result<Dataset> {
    if num_labels < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 labels, got {num_labels}"
        )));
    }
    let mut rng = derived_rng(seed, 0);
    let mut x_raw = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(0.0..1.0);
        let truth = profile.truth_probs(x, num_labels);
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut label = num_labels - 1;
        for (k, &p) in truth.iter().enumerate() {
            acc += p;
            if u < acc {
                label = k;
                break;
            }
        }
        x_raw.push(vec![x]);
        labels.push(label);
        probs.push(profile.model_probs(x, num_labels));
    }
    let meta = unit_meta();
    let rescaled = rescale_all(&x_raw, &meta);
    Ok(Dataset {
        x_raw,
        rescaled,
        feature_meta: meta,
        response: Some(ResponseData::Label(labels)),
        predictions: None,
        prob_vectors: Some(probs),
        label_names: None,
        warnings: Vec::new(),
    })
}

/// Noisy re-draws of a probability vector (Dirichlet with mean `f`), standing
/// in for repeated stochastic model outputs at one query.
pub fn sample_prob_vectors(
    f: &[f64],
    count: usize,
    concentration: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut g: Vec<f64> = f
            .iter()
            .map(|&p| {
                let shape = (concentration * p).max(1e-3);
                Gamma::new(shape, 1.0).expect("valid gamma shape").sample(rng)
            })
            .collect();
        let total: f64 = g.iter().sum();
        for v in &mut g {
            *v /= total;
        }
        out.push(g);
    }
    out
}

// ---------------------------------------------------------------------------
// k-nearest-neighbour regression
// ---------------------------------------------------------------------------

/// Plain k-NN over rescaled covariates; the harness's stand-in for an
/// externally trained predictor.
#[derive(Debug, Clone)]
pub struct KnnRegressor {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl KnnRegressor {
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<KnnRegressor> {
        if x.is_empty() {
            return Err(Error::InsufficientData { needed: 1, have: 0 });
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        Ok(KnnRegressor { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Mean response of the `k` nearest training points in Euclidean
    /// distance; distance ties break toward the smaller index.
    pub fn predict(&self, k: usize, query: &[f64]) -> Result<f64> {
        if k == 0 || k > self.x.len() {
            return Err(Error::InvalidConfig(format!(
                "k = {k} out of range for {} training points",
                self.x.len()
            )));
        }
        let mut dist: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, xi)| {
                let d2: f64 = xi
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mean = dist[..k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / k as f64;
        Ok(mean)
    }
}

/// One-shot fit-and-predict convenience.
pub fn knn_regressor_fit_predict(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    k: usize,
    query: &[f64],
) -> Result<f64> {
    KnnRegressor::fit(train_x.to_vec(), train_y.to_vec())?.predict(k, query)
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Declared role of each CSV column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFeature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Dataset schema: feature columns, then optionally a response column, a
/// block of per-label probability columns, and a point-prediction column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<SchemaFeature>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub prob_labels: Option<Vec<String>>,
    #[serde(default)]
    pub prediction: Option<String>,
}

impl CsvSchema {
    pub fn from_path(path: &Path) -> Result<CsvSchema> {
        let text = std::fs::read_to_string(path)?;
        let schema: CsvSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("schema declares no feature columns".into()));
        }
        if let Some(labels) = &self.prob_labels {
            if labels.len() < 2 {
                return Err(Error::Schema(
                    "prob_labels must list at least two columns".into(),
                ));
            }
        }
        Ok(())
    }

    /// Copy of the schema with the response made optional (prediction-time
    /// files need not carry outcomes).
    pub fn without_response(&self) -> CsvSchema {
        CsvSchema {
            response: None,
            ..self.clone()
        }
    }
}

struct ColumnIndex(BTreeMap<String, usize>);

impl ColumnIndex {
    fn get(&self, name: &str) -> Option<usize> {
        self.0.get(name).copied()
    }
}

fn parse_cell(field: &str, row: usize, column: &str) -> Result<f64> {
    let value = field.trim().parse::<f64>().map_err(|e| Error::CsvParse {
        row,
        column: column.to_string(),
        message: e.to_string(),
    })?;
    // Rust's float parser accepts "NaN" and "inf"; neither is usable data.
    if !value.is_finite() {
        return Err(Error::CsvParse {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{}'", field.trim()),
        });
    }
    Ok(value)
}

/// Parse, validate, and rescale a CSV file against a schema. Data rows are
/// numbered from 1 in error messages.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let index = ColumnIndex(
        headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.clone(), i))
            .collect(),
    );

    let mut missing = Vec::new();
    let mut feature_cols = Vec::new();
    for f in &schema.features {
        match index.get(&f.name) {
            Some(i) => feature_cols.push(i),
            None => missing.push(f.name.clone()),
        }
    }
    let response_col = match &schema.response {
        Some(name) => match index.get(name) {
            Some(i) => Some(i),
            None => {
                missing.push(name.clone());
                None
            }
        },
        None => None,
    };
    let prob_cols: Option<Vec<usize>> = match &schema.prob_labels {
        Some(names) => {
            let mut cols = Vec::new();
            for name in names {
                match index.get(name) {
                    Some(i) => cols.push(i),
                    None => missing.push(name.clone()),
                }
            }
            Some(cols)
        }
        None => None,
    };
    let prediction_col = match &schema.prediction {
        Some(name) => match index.get(name) {
            Some(i) => Some(i),
            None => {
                missing.push(name.clone());
                None
            }
        },
        None => None,
    };
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing columns: {}",
            missing.join(", ")
        )));
    }

    let label_names = schema.prob_labels.clone();
    let mut x_raw: Vec<Vec<f64>> = Vec::new();
    let mut y_real: Vec<f64> = Vec::new();
    let mut y_label: Vec<usize> = Vec::new();
    let mut predictions: Vec<f64> = Vec::new();
    let mut probs: Vec<Vec<f64>> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let cell = |col: usize| record.get(col).unwrap_or("");

        let mut features = Vec::with_capacity(feature_cols.len());
        for (&col, f) in feature_cols.iter().zip(&schema.features) {
            features.push(parse_cell(cell(col), row, &f.name)?);
        }
        x_raw.push(features);

        if let Some(cols) = &prob_cols {
            let mut p = Vec::with_capacity(cols.len());
            for (&col, name) in cols.iter().zip(label_names.as_ref().unwrap()) {
                p.push(parse_cell(cell(col), row, name)?);
            }
            probs.push(validate_simplex(&p, Some(row))?);
        }

        if let Some(col) = response_col {
            let raw = cell(col).trim();
            if let Some(names) = &label_names {
                // Label responses match a probability column name, or are a
                // bare index.
                if let Some(idx) = names.iter().position(|n| n == raw) {
                    y_label.push(idx);
                } else {
                    let idx = raw.parse::<usize>().map_err(|_| Error::CsvParse {
                        row,
                        column: schema.response.clone().unwrap(),
                        message: format!("label '{raw}' matches no probability column"),
                    })?;
                    if idx >= names.len() {
                        return Err(Error::CsvParse {
                            row,
                            column: schema.response.clone().unwrap(),
                            message: format!("label index {idx} out of range"),
                        });
                    }
                    y_label.push(idx);
                }
            } else {
                y_real.push(parse_cell(raw, row, schema.response.as_ref().unwrap())?);
            }
        }

        if let Some(col) = prediction_col {
            predictions.push(parse_cell(
                cell(col),
                row,
                schema.prediction.as_ref().unwrap(),
            )?);
        }
    }

    let names: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    let kinds: Vec<FeatureKind> = schema.features.iter().map(|f| f.kind).collect();
    let mut warnings = Vec::new();
    let meta = build_meta(&x_raw, &names, &kinds, &mut warnings)?;
    let rescaled = rescale_all(&x_raw, &meta);

    let response = match (&schema.response, &label_names) {
        (Some(_), Some(_)) => Some(ResponseData::Label(y_label)),
        (Some(_), None) => Some(ResponseData::Real(y_real)),
        (None, _) => None,
    };
    Ok(Dataset {
        x_raw,
        rescaled,
        feature_meta: meta,
        response,
        predictions: prediction_col.map(|_| predictions),
        prob_vectors: prob_cols.map(|_| probs),
        label_names,
        warnings,
    })
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::Ordinal => "ordinal",
            FeatureKind::Binary => "binary",
        };
        f.write_str(s)
    }
}
