//! Conformal calibration on a dyadic-tree partition.
//!
//! The tree is fitted to the calibration conformity scores, its leaves become
//! groups, and each group gets its own quantile threshold: the
//! `ceil((1 - alpha) * (m_k - 2) + 1)`-th smallest score among the `m_k`
//! calibration scores in the leaf. The `- 2` discounts the two rank positions
//! a fresh point could take as a strict extreme, which is the price of
//! reusing the calibration scores both for partitioning and for ranking.
//! With one leaf this reduces to split-conformal with index
//! `ceil((1 - alpha) * (n - 2) + 1)`.
//!
//! Rank indices are evaluated in exact rational arithmetic over the binary
//! value of `alpha`, so an index that lands on an integer is never bumped by
//! floating-point dust.
//!
//! Also here: the finite-sample partition-change penalty `delta(n, m)`, the
//! closed-form full-conformal band for the midrange tree regressor, and the
//! threshold-free "naive" probability-mass prediction sets used as a
//! baseline for classification.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{
    fit_robust_tree, fit_robust_tree_on_dims, fit_robust_tree_with_test_point, fit_tree_regressor,
    DyadicTree, NodeId, ScoredSample, TreeConfig, TreeRegressor,
};

// ---------------------------------------------------------------------------
// Conformity scores
// ---------------------------------------------------------------------------

/// Supported conformity scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `S(x, y) = |y - mu(x)|` for a point prediction `mu(x)`.
    AbsoluteResidual,
    /// `S(x, y) = 1 - f(x)_y` for a probability vector `f(x)`.
    ComplementProbability,
}

/// Absolute-residual score.
pub fn absolute_residual_score(y: f64, prediction: f64) -> f64 {
    (y - prediction).abs()
}

/// Complement-probability score `1 - f(x)_y` after simplex validation.
pub fn complement_probability_score(probs: &[f64], label: usize) -> Result<f64> {
    let p = validate_simplex(probs, None)?;
    if label >= p.len() {
        return Err(Error::LabelOutOfRange {
            label,
            len: p.len(),
        });
    }
    Ok(1.0 - p[label])
}

/// Accept a probability vector as-is when its sum is within `1e-9` of one,
/// renormalize when within `1e-6`, and reject anything worse (or any
/// negative / non-finite entry). The tolerances carry a tiny absolute slack
/// so sums landing exactly on a boundary in decimal are not pushed over it
/// by binary representation dust.
pub fn validate_simplex(probs: &[f64], row: Option<usize>) -> Result<Vec<f64>> {
    const ACCEPT: f64 = 1e-9;
    const RENORMALIZE: f64 = 1e-6;
    const SLACK: f64 = 1e-12;
    if probs.is_empty() {
        return Err(Error::MalformedSimplex { row, sum: 0.0 });
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::MalformedSimplex { row, sum: p });
        }
        sum += p;
    }
    let gap = (sum - 1.0).abs();
    if gap <= ACCEPT + SLACK {
        Ok(probs.to_vec())
    } else if gap <= RENORMALIZE + SLACK {
        Ok(probs.iter().map(|p| p / sum).collect())
    } else {
        Err(Error::MalformedSimplex { row, sum })
    }
}

// ---------------------------------------------------------------------------
// Rank indices, exactly
// ---------------------------------------------------------------------------

fn rational_of(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

/// `ceil((1 - alpha) * (count - 2) + 1)` as an exact integer rank (1-based).
fn leaf_rank(alpha: f64, count: usize) -> usize {
    let one_minus = BigRational::one() - rational_of(alpha);
    let value = one_minus * BigRational::from_integer(BigInt::from(count as i64 - 2))
        + BigRational::one();
    value.ceil().to_integer().to_usize().unwrap_or(usize::MAX)
}

/// `ceil((n + 1) * (1 - alpha))` as an exact integer rank (1-based).
fn split_rank(alpha: f64, n: usize) -> usize {
    let one_minus = BigRational::one() - rational_of(alpha);
    let value = one_minus * BigRational::from_integer(BigInt::from(n as u64 + 1));
    value.ceil().to_integer().to_usize().unwrap_or(usize::MAX)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn kth_smallest(scores: &[f64], rank: usize) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[rank - 1]
}

/// Per-leaf conformal threshold: the `ceil((1 - alpha) * (m_k - 2) + 1)`-th
/// smallest of the leaf's scores, or `+inf` when that rank exceeds `m_k`
/// (the prediction set then covers the whole response space).
pub fn leaf_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.len() < 3 {
        return Err(Error::LeafTooSmall {
            count: scores.len(),
        });
    }
    threshold_for_count(scores, alpha)
}

/// Same rank rule without the three-point floor; the query-aware refit can
/// leave the query's leaf with `m - 1` calibration points.
fn threshold_for_count(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyNode);
    }
    let rank = leaf_rank(alpha, scores.len());
    if rank > scores.len() {
        Ok(f64::INFINITY)
    } else {
        Ok(kth_smallest(scores, rank))
    }
}

// ---------------------------------------------------------------------------
// delta(n, m)
// ---------------------------------------------------------------------------

const LANCZOS_R: f64 = 10.900511;
const LANCZOS_COEFFS: [f64; 11] = [
    2.485_740_891_387_535_5e-5,
    1.051_423_785_817_219_7,
    -3.456_870_972_220_162_4,
    4.512_277_094_668_948,
    -2.982_852_253_235_766_4,
    1.056_397_115_771_267,
    -1.954_287_731_916_458_7e-1,
    1.709_705_434_044_412e-2,
    -5.719_261_174_043_057e-4,
    4.633_994_733_599_057e-6,
    -2.719_949_084_886_077_2e-9,
];

/// Natural log of the gamma function (Lanczos approximation, `g = 10.900511`;
/// relative accuracy around 1e-13 on the positive axis).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x).
        let s: f64 = LANCZOS_COEFFS
            .iter()
            .enumerate()
            .skip(1)
            .fold(LANCZOS_COEFFS[0], |acc, (i, c)| acc + c / (i as f64 - x));
        std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().abs().ln()
            - ((0.5 - x) * ((0.5 - x + LANCZOS_R) / std::f64::consts::E).ln()
                + (2.0 * (std::f64::consts::E / std::f64::consts::PI).sqrt()).ln()
                + s.ln())
    } else {
        let s: f64 = LANCZOS_COEFFS
            .iter()
            .enumerate()
            .skip(1)
            .fold(LANCZOS_COEFFS[0], |acc, (i, c)| acc + c / (x + i as f64 - 1.0));
        (x - 0.5) * ((x - 0.5 + LANCZOS_R) / std::f64::consts::E).ln()
            + (2.0 * (std::f64::consts::E / std::f64::consts::PI).sqrt()).ln()
            + s.ln()
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `delta(n, m) = 2/m + C(n+1, m) (m/(n+1))^m (1 - m/(n+1))^(n+1-m)`,
/// evaluated in log space. No domain validation; see [`delta_bound`].
pub fn delta_bound_raw(n: usize, m: usize) -> f64 {
    let np1 = n as f64 + 1.0;
    let p = m as f64 / np1;
    let log_term = ln_choose(n + 1, m) + m as f64 * p.ln() + (np1 - m as f64) * (1.0 - p).ln();
    2.0 / m as f64 + log_term.exp()
}

/// Partition-change penalty, restricted to the meaningful domain
/// `3 <= m <= n`.
pub fn delta_bound(n: usize, m: usize) -> Result<f64> {
    if m < 3 || m > n {
        return Err(Error::DeltaDomain { n, m });
    }
    Ok(delta_bound_raw(n, m))
}

/// Closed-form upper bound `2/m + e / (2 pi sqrt(c (1 - c) (n + 1)))` with
/// `c = m / (n + 1)`; dominates the exact value whenever `m = c (n + 1)` is
/// integral.
pub fn delta_bound_interpretable(n: usize, m: usize) -> Result<f64> {
    if m < 3 || m > n {
        return Err(Error::DeltaDomain { n, m });
    }
    let np1 = n as f64 + 1.0;
    let c = m as f64 / np1;
    Ok(2.0 / m as f64
        + std::f64::consts::E / (2.0 * std::f64::consts::PI * (c * (1.0 - c) * np1).sqrt()))
}

/// Theoretical coverage window, clamped to `[0, 1]` for reporting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoverageBounds {
    /// `1 - alpha - delta(n, m)`.
    pub lower: f64,
    /// `1 - alpha + 1/(m - 2) + delta(n, m)`.
    pub upper: f64,
    /// Query-aware refit: `1 - alpha - 2/m`.
    pub refit_lower: f64,
    /// Query-aware refit: `1 - alpha + 1/(m - 2) + 2/m`.
    pub refit_upper: f64,
}

impl CoverageBounds {
    pub fn new(alpha: f64, n: usize, m: usize) -> Result<CoverageBounds> {
        check_alpha(alpha)?;
        let delta = delta_bound(n, m)?;
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        Ok(CoverageBounds {
            lower: clamp(1.0 - alpha - delta),
            upper: clamp(1.0 - alpha + 1.0 / (m as f64 - 2.0) + delta),
            refit_lower: clamp(1.0 - alpha - 2.0 / m as f64),
            refit_upper: clamp(1.0 - alpha + 1.0 / (m as f64 - 2.0) + 2.0 / m as f64),
        })
    }
}

// ---------------------------------------------------------------------------
// Rules and prediction sets
// ---------------------------------------------------------------------------

/// How a rule's partition relates to queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// One tree shared by all queries.
    SharedTree,
    /// The tree is refitted per query with the query location included.
    RefitPerQuery,
}

/// A calibrated rule: partition, per-leaf thresholds and counts, and the
/// penalty `delta(n, m)` its guarantees carry.
#[derive(Debug, Clone)]
pub struct ConformalRule {
    pub tree: DyadicTree,
    pub leaf_thresholds: BTreeMap<NodeId, f64>,
    pub leaf_counts: BTreeMap<NodeId, usize>,
    pub alpha: f64,
    pub delta: f64,
    pub mode: CalibrationMode,
}

/// Model output accompanying a query point.
#[derive(Debug, Clone)]
pub enum ModelOutput {
    /// Point prediction `mu(x)` (absolute-residual score).
    Scalar(f64),
    /// Probability vector `f(x)` (complement-probability score).
    Probs(Vec<f64>),
}

/// The set body: a symmetric interval or a label subset.
#[derive(Debug, Clone, PartialEq)]
pub enum SetBody {
    Interval { lo: f64, hi: f64 },
    Labels(Vec<usize>),
}

/// Prediction set for one query point.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// Leaf the query fell in; `None` for merged (forest) sets.
    pub leaf: Option<NodeId>,
    /// Threshold used; `None` for merged classification sets.
    pub threshold: Option<f64>,
    /// Whole-response-space set emitted when the rank exceeded the leaf count.
    pub vacuous: bool,
    pub body: SetBody,
}

impl PredictionSet {
    /// Interval width or label-set cardinality.
    pub fn size(&self) -> f64 {
        match &self.body {
            SetBody::Interval { lo, hi } => hi - lo,
            SetBody::Labels(l) => l.len() as f64,
        }
    }

    /// Classification sets may be empty when the threshold is degenerate.
    pub fn is_empty(&self) -> bool {
        matches!(&self.body, SetBody::Labels(l) if l.is_empty())
    }

    pub fn contains_value(&self, y: f64) -> bool {
        match &self.body {
            SetBody::Interval { lo, hi } => y >= *lo && y <= *hi,
            SetBody::Labels(_) => false,
        }
    }

    pub fn contains_label(&self, label: usize) -> bool {
        match &self.body {
            SetBody::Labels(l) => l.contains(&label),
            SetBody::Interval { .. } => false,
        }
    }
}

fn build_set(leaf: Option<NodeId>, threshold: f64, output: &ModelOutput) -> Result<PredictionSet> {
    let vacuous = threshold.is_infinite();
    let body = match output {
        ModelOutput::Scalar(mu) => {
            if vacuous {
                SetBody::Interval {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                }
            } else {
                SetBody::Interval {
                    lo: mu - threshold,
                    hi: mu + threshold,
                }
            }
        }
        ModelOutput::Probs(p) => {
            let p = validate_simplex(p, None)?;
            if vacuous {
                SetBody::Labels((0..p.len()).collect())
            } else {
                let cut = 1.0 - threshold;
                SetBody::Labels(
                    p.iter()
                        .enumerate()
                        .filter(|(_, &pk)| pk >= cut)
                        .map(|(k, _)| k)
                        .collect(),
                )
            }
        }
    };
    Ok(PredictionSet {
        leaf,
        threshold: Some(threshold),
        vacuous,
        body,
    })
}

/// Calibrate a shared-tree rule: fit the robust tree to the scores, then
/// compute one threshold per leaf.
pub fn calibrate_conformal_tree(
    calib: &[ScoredSample],
    config: &TreeConfig,
    alpha: f64,
) -> Result<ConformalRule> {
    check_alpha(alpha)?;
    let tree = fit_robust_tree(calib, config)?;
    finish_rule(tree, calib, config, alpha)
}

/// [`calibrate_conformal_tree`] with splits restricted to `allowed_dims`.
pub fn calibrate_conformal_tree_on_dims(
    calib: &[ScoredSample],
    config: &TreeConfig,
    alpha: f64,
    allowed_dims: &[usize],
) -> Result<ConformalRule> {
    check_alpha(alpha)?;
    let tree = fit_robust_tree_on_dims(calib, config, allowed_dims)?;
    finish_rule(tree, calib, config, alpha)
}

fn finish_rule(
    tree: DyadicTree,
    calib: &[ScoredSample],
    config: &TreeConfig,
    alpha: f64,
) -> Result<ConformalRule> {
    let mut leaf_scores: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for s in calib {
        let leaf = tree.leaf_of(&s.x)?;
        leaf_scores.entry(leaf).or_default().push(s.score);
    }
    let mut leaf_thresholds = BTreeMap::new();
    let mut leaf_counts = BTreeMap::new();
    for leaf in tree.leaves().collect::<Vec<_>>() {
        let scores = leaf_scores.remove(&leaf).unwrap_or_default();
        leaf_thresholds.insert(leaf, leaf_threshold(&scores, alpha)?);
        leaf_counts.insert(leaf, scores.len());
    }
    let delta = delta_bound(calib.len(), config.min_samples_per_leaf)?;
    Ok(ConformalRule {
        tree,
        leaf_thresholds,
        leaf_counts,
        alpha,
        delta,
        mode: CalibrationMode::SharedTree,
    })
}

/// Prediction set for `x` under a calibrated rule.
pub fn predict_set(rule: &ConformalRule, x: &[f64], output: &ModelOutput) -> Result<PredictionSet> {
    let leaf = rule.tree.leaf_of(x)?;
    let threshold = rule.leaf_thresholds[&leaf];
    build_set(Some(leaf), threshold, output)
}

/// Query-aware prediction: refit the tree with `x` participating in the
/// minimum-count checks, then threshold within `x`'s leaf. Carries the
/// tighter `1 - alpha - 2/m` guarantee at a per-query refit cost.
pub fn predict_set_refit(
    calib: &[ScoredSample],
    config: &TreeConfig,
    alpha: f64,
    x: &[f64],
    output: &ModelOutput,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let tree = fit_robust_tree_with_test_point(calib, x, config)?;
    let leaf = tree.leaf_of(x)?;
    let cell = tree.box_of(leaf)?;
    let scores: Vec<f64> = calib
        .iter()
        .filter(|s| cell.contains(&s.x))
        .map(|s| s.score)
        .collect();
    let threshold = threshold_for_count(&scores, alpha)?;
    build_set(Some(leaf), threshold, output)
}

// ---------------------------------------------------------------------------
// Full-conformal band with the midrange tree regressor
// ---------------------------------------------------------------------------

/// Closed-form full-conformal band: the robust tree is the regressor itself
/// (per-leaf midrange), absolute residuals are the scores, and a single
/// split-style quantile of those residuals gives the half-width.
#[derive(Debug, Clone)]
pub struct FullConformalBand {
    pub regressor: TreeRegressor,
    /// The `ceil((n + 1)(1 - alpha))`-th smallest residual (or `+inf`).
    pub threshold: f64,
}

impl FullConformalBand {
    pub fn interval(&self, x: &[f64]) -> Result<(f64, f64)> {
        let mu = self.regressor.predict(x)?;
        Ok((mu - self.threshold, mu + self.threshold))
    }
}

/// Fit the band on `(x, y)` pairs.
pub fn full_conformal_band(
    x: &[Vec<f64>],
    y: &[f64],
    config: &TreeConfig,
    alpha: f64,
) -> Result<FullConformalBand> {
    check_alpha(alpha)?;
    let regressor = fit_tree_regressor(x, y, config)?;
    let mut scores = Vec::with_capacity(y.len());
    for (xi, &yi) in x.iter().zip(y) {
        scores.push((yi - regressor.predict(xi)?).abs());
    }
    let rank = split_rank(alpha, scores.len());
    let threshold = if rank > scores.len() {
        f64::INFINITY
    } else {
        kth_smallest(&scores, rank)
    };
    Ok(FullConformalBand {
        regressor,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Naive probability-mass sets
// ---------------------------------------------------------------------------

/// Smallest super-level set of `q` holding at least `1 - alpha` mass:
/// labels are taken from the top until the target mass is reached, whole
/// tie-groups at a time.
pub fn naive_set_single(q: &[f64], alpha: f64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let q = validate_simplex(q, None)?;
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    let target = 1.0 - alpha;
    let mut mass = 0.0;
    let mut tau = q[order[0]];
    let mut i = 0;
    while i < order.len() {
        let level = q[order[i]];
        let mut j = i;
        while j < order.len() && q[order[j]] == level {
            mass += q[order[j]];
            j += 1;
        }
        tau = level;
        if mass >= target {
            break;
        }
        i = j;
    }
    let mut set: Vec<usize> = (0..q.len()).filter(|&l| q[l] >= tau).collect();
    set.sort_unstable();
    Ok(set)
}

/// Majority vote over per-sample naive sets: keep labels appearing in at
/// least half of the `M` sets.
pub fn naive_uq_set(prob_samples: &[Vec<f64>], alpha: f64) -> Result<Vec<usize>> {
    if prob_samples.is_empty() {
        return Err(Error::InvalidConfig("no probability samples".into()));
    }
    let m = prob_samples.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (row, q) in prob_samples.iter().enumerate() {
        let set = naive_set_single(q, alpha).map_err(|e| match e {
            Error::MalformedSimplex { sum, .. } => Error::MalformedSimplex {
                row: Some(row),
                sum,
            },
            other => other,
        })?;
        for l in set {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    Ok(counts
        .into_iter()
        .filter(|&(_, c)| 2 * c >= m)
        .map(|(l, _)| l)
        .collect())
}

// ---------------------------------------------------------------------------
// JSON form
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LeafJson {
    l: u32,
    k: u64,
    threshold: ThresholdJson,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdJson {
    Finite(f64),
    Inf(String),
}

impl From<f64> for ThresholdJson {
    fn from(v: f64) -> ThresholdJson {
        if v.is_infinite() {
            ThresholdJson::Inf("inf".into())
        } else {
            ThresholdJson::Finite(v)
        }
    }
}

impl ThresholdJson {
    fn value(&self) -> Result<f64> {
        match self {
            ThresholdJson::Finite(v) => Ok(*v),
            ThresholdJson::Inf(s) if s == "inf" => Ok(f64::INFINITY),
            ThresholdJson::Inf(s) => Err(Error::Schema(format!("bad threshold '{s}'"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RuleJson {
    version: String,
    tree: serde_json::Value,
    alpha: f64,
    delta: f64,
    mode: CalibrationMode,
    leaves: Vec<LeafJson>,
}

impl ConformalRule {
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let leaves = self
            .leaf_thresholds
            .iter()
            .map(|(id, &thr)| LeafJson {
                l: id.depth,
                k: id.pos,
                threshold: thr.into(),
                count: self.leaf_counts[id],
            })
            .collect();
        Ok(serde_json::to_value(RuleJson {
            version: "1".into(),
            tree: self.tree.to_json_value()?,
            alpha: self.alpha,
            delta: self.delta,
            mode: self.mode,
            leaves,
        })?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json_value()?)?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<ConformalRule> {
        let parsed: RuleJson = serde_json::from_value(value)?;
        if parsed.version != "1" {
            return Err(Error::Schema(format!(
                "unsupported rule version '{}'",
                parsed.version
            )));
        }
        let tree = DyadicTree::from_json_value(parsed.tree)?;
        let mut leaf_thresholds = BTreeMap::new();
        let mut leaf_counts = BTreeMap::new();
        for leaf in parsed.leaves {
            let id = NodeId {
                depth: leaf.l,
                pos: leaf.k,
            };
            if !tree.is_leaf(id) {
                return Err(Error::Schema(format!(
                    "threshold for non-leaf node ({}, {})",
                    leaf.l, leaf.k
                )));
            }
            leaf_thresholds.insert(id, leaf.threshold.value()?);
            leaf_counts.insert(id, leaf.count);
        }
        if leaf_thresholds.len() != tree.num_leaves() {
            return Err(Error::Schema("thresholds do not cover all leaves".into()));
        }
        check_alpha(parsed.alpha)?;
        Ok(ConformalRule {
            tree,
            leaf_thresholds,
            leaf_counts,
            alpha: parsed.alpha,
            delta: parsed.delta,
            mode: parsed.mode,
        })
    }

    pub fn from_json(text: &str) -> Result<ConformalRule> {
        ConformalRule::from_json_value(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_threshold_forced_arithmetic() {
        // m_k = 20, alpha = 0.1: rank 18.
        let scores: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(leaf_threshold(&scores, 0.1).unwrap(), 18.0);

        // m_k = 3, alpha = 0.5: the median.
        assert_eq!(leaf_threshold(&[5.0, 1.0, 3.0], 0.5).unwrap(), 3.0);

        // m_k = 10, alpha = 0.01: rank 9.
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 * 1.5).collect();
        assert_eq!(leaf_threshold(&scores, 0.01).unwrap(), 9.0 * 1.5);

        assert!(matches!(
            leaf_threshold(&[1.0, 2.0], 0.1),
            Err(Error::LeafTooSmall { count: 2 })
        ));
        assert!(leaf_threshold(&[1.0, 2.0, 3.0], 0.0).is_err());
        assert!(leaf_threshold(&[1.0, 2.0, 3.0], 1.0).is_err());
    }

    /// Rank-free oracle: smallest score whose left-count reaches the target
    /// coverage mass, scanned over sorted candidates.
    fn scan_threshold(scores: &[f64], alpha: f64) -> f64 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let need = (1.0 - alpha) * (scores.len() as f64 - 2.0) + 1.0;
        for &s in &sorted {
            let covered = sorted.iter().filter(|&&t| t <= s).count();
            if covered as f64 >= need {
                return s;
            }
        }
        f64::INFINITY
    }

    #[test]
    fn leaf_threshold_matches_scan_oracle() {
        let scores: Vec<f64> = (1..=10).map(|i| (i as f64 * 7.3) % 5.0).collect();
        assert_eq!(
            leaf_threshold(&scores, 0.01).unwrap(),
            scan_threshold(&scores, 0.01)
        );
        // With ties.
        let scores = vec![2.0, 2.0, 2.0, 1.0, 1.0, 5.0, 5.0, 4.0, 0.5, 3.0];
        for alpha in [0.03, 0.12, 0.33, 0.47] {
            assert_eq!(
                leaf_threshold(&scores, alpha).unwrap(),
                scan_threshold(&scores, alpha)
            );
        }
    }

    #[test]
    fn integer_boundary_rank_is_exact() {
        // (1 - 0.1) * 10 = 9 exactly in real arithmetic: rank must be 10,
        // not 11, despite 0.9 * 10 rounding above 9 in f64.
        let scores: Vec<f64> = (1..=12).map(|i| i as f64).collect();
        assert_eq!(leaf_threshold(&scores, 0.1).unwrap(), 10.0);
    }

    #[test]
    fn sentinel_never_fires_for_leaf_rule() {
        // The rank (1 - alpha)(m_k - 2) + 1 cannot exceed m_k - 1, so the
        // vacuous branch is unreachable here for any alpha in (0, 1); in
        // particular it never fires once alpha clears 1/(m_k - 1).
        for m_k in 3..120usize {
            let scores: Vec<f64> = (0..m_k).map(|i| i as f64).collect();
            for step in 0..40 {
                let alpha = 1e-6 + step as f64 * 0.025;
                let thr = leaf_threshold(&scores, alpha.min(0.999_999)).unwrap();
                assert!(
                    thr.is_finite(),
                    "vacuous threshold at m_k = {m_k}, alpha = {alpha}"
                );
            }
        }
    }

    #[test]
    fn full_conformal_sentinel_fires_below_alpha_floor() {
        // The split-style rank ceil((n + 1)(1 - alpha)) does exceed n when
        // alpha < 1/(n + 1): the band degenerates to the whole line.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            let t = (i as f64 + 0.5) / 10.0;
            x.push(vec![t]);
            y.push(t * 2.0);
        }
        let band = full_conformal_band(&x, &y, &TreeConfig::new(3, 2), 0.05).unwrap();
        assert!(band.threshold.is_infinite());
        let band = full_conformal_band(&x, &y, &TreeConfig::new(3, 2), 0.2).unwrap();
        assert!(band.threshold.is_finite());
    }

    #[test]
    fn delta_bound_small_case_and_domain() {
        // Raw value for n = 3, m = 2: C(4,2) (1/2)^2 (1/2)^2 + 2/2 = 1.375.
        let raw = delta_bound_raw(3, 2);
        assert!((raw - 1.375).abs() < 1e-12, "raw = {raw}");
        assert!(matches!(
            delta_bound(3, 2),
            Err(Error::DeltaDomain { n: 3, m: 2 })
        ));
        assert!(matches!(delta_bound(4, 5), Err(Error::DeltaDomain { .. })));
        assert!(delta_bound(20, 5).is_ok());
    }

    #[test]
    fn ln_gamma_reference_values() {
        assert!((ln_gamma(0.5) - 0.5723649429247001).abs() < 1e-12);
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(10.0) - 362880f64.ln()).abs() < 1e-10);
        let ln_100_fact: f64 = (1..=100).map(|i| (i as f64).ln()).sum();
        assert!((ln_gamma(101.0) - ln_100_fact).abs() < 1e-9);
    }

    #[test]
    fn coverage_bounds_clamped() {
        let b = CoverageBounds::new(0.1, 20, 5).unwrap();
        assert!(b.lower >= 0.0 && b.upper <= 1.0);
        assert!(b.lower < b.upper);
        assert!(b.refit_lower >= 0.0 && b.refit_upper <= 1.0);
    }

    fn calib_1d(n: usize) -> Vec<ScoredSample> {
        (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                let s = if x < 0.5 { x } else { 2.0 + x };
                ScoredSample::new(vec![x], s).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_leaf_rule_is_split_conformal() {
        let calib = calib_1d(50);
        let rule = calibrate_conformal_tree(&calib, &TreeConfig::new(10, 1), 0.1).unwrap();
        assert_eq!(rule.tree.num_leaves(), 1);
        let scores: Vec<f64> = calib.iter().map(|s| s.score).collect();
        let expected = leaf_threshold(&scores, 0.1).unwrap();
        let set = predict_set(&rule, &[0.3], &ModelOutput::Scalar(1.0)).unwrap();
        assert_eq!(set.threshold, Some(expected));
        assert_eq!(
            set.body,
            SetBody::Interval {
                lo: 1.0 - expected,
                hi: 1.0 + expected
            }
        );
    }

    #[test]
    fn predict_set_regression_and_classification() {
        let calib = calib_1d(60);
        let rule = calibrate_conformal_tree(&calib, &TreeConfig::new(10, 4), 0.1).unwrap();

        let set = predict_set(&rule, &[0.2], &ModelOutput::Scalar(2.0)).unwrap();
        let thr = set.threshold.unwrap();
        match set.body {
            SetBody::Interval { lo, hi } => {
                assert_eq!(lo, 2.0 - thr);
                assert_eq!(hi, 2.0 + thr);
            }
            _ => panic!("expected interval"),
        }

        // Classification: super-level set at 1 - S*.
        let mut rule = rule;
        let leaf = rule.tree.leaf_of(&[0.2]).unwrap();
        rule.leaf_thresholds.insert(leaf, 0.4);
        let set = predict_set(
            &rule,
            &[0.2],
            &ModelOutput::Probs(vec![0.7, 0.25, 0.05]),
        )
        .unwrap();
        assert_eq!(set.body, SetBody::Labels(vec![0]));

        // Degenerate threshold zero keeps only probability-one labels.
        rule.leaf_thresholds.insert(leaf, 0.0);
        let set = predict_set(&rule, &[0.2], &ModelOutput::Probs(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(set.body, SetBody::Labels(vec![0]));
        let set = predict_set(
            &rule,
            &[0.2],
            &ModelOutput::Probs(vec![0.7, 0.25, 0.05]),
        )
        .unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn refit_equals_shared_when_partition_agrees() {
        let calib = calib_1d(80);
        let config = TreeConfig::new(10, 4);
        let rule = calibrate_conformal_tree(&calib, &config, 0.1).unwrap();
        for xq in [0.11, 0.43, 0.77, 0.98] {
            let shared = predict_set(&rule, &[xq], &ModelOutput::Scalar(0.0)).unwrap();
            let refit =
                predict_set_refit(&calib, &config, 0.1, &[xq], &ModelOutput::Scalar(0.0)).unwrap();
            // The refit partition matches here, so the sets must be identical.
            assert_eq!(shared.threshold, refit.threshold);
            assert_eq!(shared.body, refit.body);
        }

        // K = 1 forces identical behavior everywhere.
        let config1 = TreeConfig::new(10, 1);
        let rule1 = calibrate_conformal_tree(&calib, &config1, 0.1).unwrap();
        let shared = predict_set(&rule1, &[0.66], &ModelOutput::Scalar(0.0)).unwrap();
        let refit =
            predict_set_refit(&calib, &config1, 0.1, &[0.66], &ModelOutput::Scalar(0.0)).unwrap();
        assert_eq!(shared.threshold, refit.threshold);
    }

    #[test]
    fn refit_differs_when_count_flips_candidacy() {
        // Four points + the query on the left of 1/2, five on the right.
        let mut pairs = vec![(0.05, 0.0), (0.15, 0.1), (0.25, 0.05), (0.35, 0.02)];
        for i in 0..5 {
            pairs.push((0.55 + i as f64 / 20.0, 10.0 + i as f64));
        }
        let calib: Vec<ScoredSample> = pairs
            .iter()
            .map(|&(x, s)| ScoredSample::new(vec![x], s).unwrap())
            .collect();
        let config = TreeConfig::new(5, 4);
        let rule = calibrate_conformal_tree(&calib, &config, 0.5).unwrap();
        assert_eq!(rule.tree.num_leaves(), 1);
        let shared = predict_set(&rule, &[0.2], &ModelOutput::Scalar(0.0)).unwrap();
        let refit =
            predict_set_refit(&calib, &config, 0.5, &[0.2], &ModelOutput::Scalar(0.0)).unwrap();
        // The refit isolates the low-score half; its threshold drops.
        assert!(refit.threshold.unwrap() < shared.threshold.unwrap());
    }

    #[test]
    fn full_conformal_zero_width_on_noiseless_step() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let t = (i as f64 + 0.5) / 40.0;
            x.push(vec![t]);
            y.push(if t < 0.5 { 1.0 } else { -2.0 });
        }
        let band = full_conformal_band(&x, &y, &TreeConfig::new(10, 4), 0.1).unwrap();
        assert_eq!(band.threshold, 0.0);
        let (lo, hi) = band.interval(&[0.2]).unwrap();
        assert_eq!(lo, 1.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn naive_set_examples() {
        // A point mass covers on its own.
        assert_eq!(
            naive_set_single(&[1.0, 0.0, 0.0], 0.25).unwrap(),
            vec![0]
        );
        // Uniform over four labels at alpha = 0.2: three give 0.75 < 0.8.
        assert_eq!(
            naive_set_single(&[0.25, 0.25, 0.25, 0.25], 0.2).unwrap(),
            vec![0, 1, 2, 3]
        );
        // Majority vote over {0,1}, {1}, {1,2}.
        let sets = vec![
            vec![0.45, 0.45, 0.10],
            vec![0.05, 0.90, 0.05],
            vec![0.10, 0.45, 0.45],
        ];
        assert_eq!(naive_uq_set(&sets, 0.2).unwrap(), vec![1]);
    }

    #[test]
    fn score_functions() {
        assert_eq!(absolute_residual_score(3.0, 5.5), 2.5);
        assert_eq!(absolute_residual_score(5.5, 3.0), 2.5);
        let s = complement_probability_score(&[0.7, 0.25, 0.05], 1).unwrap();
        assert_eq!(s, 0.75);
        assert!(matches!(
            complement_probability_score(&[0.7, 0.3], 2),
            Err(Error::LabelOutOfRange { label: 2, len: 2 })
        ));
    }

    #[test]
    fn simplex_tolerances() {
        // Within 1e-9: accepted verbatim.
        let p = validate_simplex(&[0.5, 0.5 - 5e-10], None).unwrap();
        assert_eq!(p[0], 0.5);
        // Within 1e-6: renormalized.
        let p = validate_simplex(&[0.5, 0.499_999_5], None).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // Beyond: rejected.
        assert!(validate_simplex(&[0.5, 0.4], None).is_err());
        assert!(validate_simplex(&[1.2, -0.2], None).is_err());
    }

    #[test]
    fn rule_json_round_trip() {
        let calib = calib_1d(60);
        let rule = calibrate_conformal_tree(&calib, &TreeConfig::new(10, 4), 0.1).unwrap();
        let text = rule.to_json().unwrap();
        let back = ConformalRule::from_json(&text).unwrap();
        assert!(rule.tree.partitions_equal(&back.tree).unwrap());
        assert_eq!(rule.leaf_thresholds, back.leaf_thresholds);
        assert_eq!(rule.leaf_counts, back.leaf_counts);
        assert_eq!(rule.alpha, back.alpha);
        assert_eq!(rule.mode, back.mode);
    }

    #[test]
    fn infinite_threshold_serializes_as_inf() {
        let calib = calib_1d(60);
        let mut rule = calibrate_conformal_tree(&calib, &TreeConfig::new(10, 1), 0.1).unwrap();
        rule.leaf_thresholds.insert(NodeId::ROOT, f64::INFINITY);
        let value = rule.to_json_value().unwrap();
        assert_eq!(value["leaves"][0]["threshold"], "inf");
        let back = ConformalRule::from_json_value(value).unwrap();
        assert!(back.leaf_thresholds[&NodeId::ROOT].is_infinite());
    }
}
