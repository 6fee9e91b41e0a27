//! Conformal forests: majority-vote merging of per-tree prediction sets.
//!
//! Each tree is calibrated on a without-replacement subsample of the
//! calibration data (keeping the subsample i.i.d. with the test point, which
//! bootstrap resampling would break) and may be restricted to a random
//! subset of the dimensions. The merged set keeps the points contained in
//! strictly more than half of the per-tree sets. For symmetric intervals
//! about a common centre this is exactly the interval whose half-width is
//! the `(floor(h/2) + 1)`-th largest of the per-tree half-widths.

use rayon::prelude::*;

use crate::conformal::{
    calibrate_conformal_tree_on_dims, predict_set, ConformalRule, ModelOutput,
    PredictionSet, SetBody,
};
use crate::data::derived_rng;
use crate::error::{Error, Result};
use crate::tree::{ScoredSample, TreeConfig};

/// Forest hyperparameters.
#[derive(Debug, Clone)]
pub struct ForestConfig {
    /// Number of trees `h`.
    pub num_trees: usize,
    /// Fraction of the calibration data drawn (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Fraction of the dimensions each tree may split on (at least one).
    pub feature_fraction: f64,
    /// Per-tree fitting parameters.
    pub base: TreeConfig,
    pub alpha: f64,
    pub rng_seed: u64,
}

impl ForestConfig {
    pub fn new(num_trees: usize, base: TreeConfig, alpha: f64, rng_seed: u64) -> ForestConfig {
        ForestConfig {
            num_trees,
            subsample_fraction: 0.7,
            feature_fraction: 1.0,
            base,
            alpha,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.num_trees == 0 {
            return Err(Error::InvalidConfig("num_trees must be at least 1".into()));
        }
        for (name, v) in [
            ("subsample_fraction", self.subsample_fraction),
            ("feature_fraction", self.feature_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v} not in (0, 1]")));
            }
        }
        Ok(())
    }

    /// Points drawn per tree.
    pub fn subsample_size(&self, n: usize) -> usize {
        (n as f64 * self.subsample_fraction).floor() as usize
    }

    /// Dimensions allowed per tree.
    pub fn feature_count(&self, d: usize) -> usize {
        ((d as f64 * self.feature_fraction).round() as usize).clamp(1, d)
    }
}

/// Calibrate `h` independent rules. Deterministic given the seed: tree `i`
/// draws from its own stream, and trees are calibrated in parallel but
/// collected in index order.
pub fn calibrate_forest(calib: &[ScoredSample], config: &ForestConfig) -> Result<Vec<ConformalRule>> {
    config.validate()?;
    if calib.is_empty() {
        return Err(Error::InsufficientData {
            needed: config.base.min_samples_per_leaf,
            have: 0,
        });
    }
    let n = calib.len();
    let d = calib[0].x.len();
    let b = config.subsample_size(n);
    if b < config.base.min_samples_per_leaf {
        return Err(Error::SubsampleTooSmall {
            size: b,
            min_leaf: config.base.min_samples_per_leaf,
        });
    }
    let d_sub = config.feature_count(d);
    (0..config.num_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(config.rng_seed, i as u64);
            let mut rows = rand::seq::index::sample(&mut rng, n, b).into_vec();
            rows.sort_unstable();
            let mut dims = rand::seq::index::sample(&mut rng, d, d_sub).into_vec();
            dims.sort_unstable();
            let subsample: Vec<ScoredSample> = rows.iter().map(|&r| calib[r].clone()).collect();
            calibrate_conformal_tree_on_dims(&subsample, &config.base, config.alpha, &dims)
        })
        .collect()
}

/// Merge the per-rule sets at `x` by strict majority.
pub fn majority_vote_set(
    rules: &[ConformalRule],
    x: &[f64],
    output: &ModelOutput,
) -> Result<PredictionSet> {
    if rules.is_empty() {
        return Err(Error::EmptyRuleList);
    }
    let h = rules.len();
    match output {
        ModelOutput::Scalar(mu) => {
            // Intervals share the centre mu, so the vote reduces to an order
            // statistic of half-widths: a point at distance t is covered by
            // strictly more than h/2 intervals iff t does not exceed the
            // (floor(h/2) + 1)-th largest half-width.
            let mut widths = Vec::with_capacity(h);
            for rule in rules {
                let leaf = rule.tree.leaf_of(x)?;
                widths.push(rule.leaf_thresholds[&leaf]);
            }
            widths.sort_by(f64::total_cmp);
            let merged = widths[h - (h / 2 + 1)];
            let vacuous = merged.is_infinite();
            let body = if vacuous {
                SetBody::Interval {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                }
            } else {
                SetBody::Interval {
                    lo: mu - merged,
                    hi: mu + merged,
                }
            };
            Ok(PredictionSet {
                leaf: None,
                threshold: Some(merged),
                vacuous,
                body,
            })
        }
        ModelOutput::Probs(p) => {
            let mut counts = vec![0usize; p.len()];
            let mut vacuous_rules = 0usize;
            for rule in rules {
                let set = predict_set(rule, x, output)?;
                if set.vacuous {
                    vacuous_rules += 1;
                }
                if let SetBody::Labels(labels) = set.body {
                    for l in labels {
                        counts[l] += 1;
                    }
                }
            }
            let labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| 2 * c > h)
                .map(|(l, _)| l)
                .collect();
            Ok(PredictionSet {
                leaf: None,
                threshold: None,
                vacuous: 2 * vacuous_rules > h,
                body: SetBody::Labels(labels),
            })
        }
    }
}

/// Forest JSON: the config echo plus one rule object per tree.
pub fn forest_to_json_value(
    rules: &[ConformalRule],
    config: &ForestConfig,
) -> Result<serde_json::Value> {
    let rule_values: Vec<serde_json::Value> = rules
        .iter()
        .map(|r| r.to_json_value())
        .collect::<Result<_>>()?;
    Ok(serde_json::json!({
        "version": "1",
        "config": {
            "num_trees": config.num_trees,
            "subsample_fraction": config.subsample_fraction,
            "feature_fraction": config.feature_fraction,
            "base": config.base,
            "alpha": config.alpha,
            "rng_seed": config.rng_seed,
        },
        "rules": rule_values,
    }))
}

/// Half-width this rule assigns at `x` (its leaf's threshold).
pub fn interval_half_width(rule: &ConformalRule, x: &[f64]) -> Result<f64> {
    let leaf = rule.tree.leaf_of(x)?;
    Ok(rule.leaf_thresholds[&leaf])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::calibrate_conformal_tree;
    use crate::tree::NodeId;

    fn heteroskedastic_calib(n: usize, seed: u64) -> Vec<ScoredSample> {
        let mut u = 0.5 + seed as f64 * 1e-3;
        (0..n)
            .map(|i| {
                u = (u * 73.91 + 0.1371).fract();
                let x = (i as f64 + 0.5) / n as f64;
                ScoredSample::new(vec![x], x * u).unwrap()
            })
            .collect()
    }

    fn synthetic_rule(widths: f64) -> ConformalRule {
        let calib = heteroskedastic_calib(30, 1);
        let mut rule = calibrate_conformal_tree(&calib, &TreeConfig::new(5, 1), 0.1).unwrap();
        rule.leaf_thresholds.insert(NodeId::ROOT, widths);
        rule
    }

    #[test]
    fn single_tree_forest_matches_plain_calibration() {
        let calib = heteroskedastic_calib(120, 7);
        let mut config = ForestConfig::new(1, TreeConfig::new(15, 4), 0.1, 99);
        config.subsample_fraction = 1.0;
        let forest = calibrate_forest(&calib, &config).unwrap();
        assert_eq!(forest.len(), 1);
        let plain = calibrate_conformal_tree(&calib, &config.base, 0.1).unwrap();
        assert!(forest[0].tree.partitions_equal(&plain.tree).unwrap());
        assert_eq!(forest[0].leaf_thresholds, plain.leaf_thresholds);

        let merged = majority_vote_set(&forest, &[0.4], &ModelOutput::Scalar(1.0)).unwrap();
        let single = predict_set(&plain, &[0.4], &ModelOutput::Scalar(1.0)).unwrap();
        assert_eq!(merged.threshold, single.threshold);
    }

    #[test]
    fn merged_half_width_is_strict_majority_order_statistic() {
        let rules: Vec<ConformalRule> = [1.0, 2.0, 5.0].iter().map(|&w| synthetic_rule(w)).collect();
        let set = majority_vote_set(&rules, &[0.5], &ModelOutput::Scalar(0.0)).unwrap();
        assert_eq!(set.threshold, Some(2.0));

        let rules: Vec<ConformalRule> = [1.0, 3.0].iter().map(|&w| synthetic_rule(w)).collect();
        let set = majority_vote_set(&rules, &[0.5], &ModelOutput::Scalar(0.0)).unwrap();
        assert_eq!(set.threshold, Some(1.0));

        assert!(matches!(
            majority_vote_set(&[], &[0.5], &ModelOutput::Scalar(0.0)),
            Err(Error::EmptyRuleList)
        ));
    }

    #[test]
    fn merge_matches_brute_force_grid_vote() {
        let widths = [0.3, 1.1, 0.7, 2.4, 0.5, 0.9];
        let rules: Vec<ConformalRule> = widths.iter().map(|&w| synthetic_rule(w)).collect();
        let mu = 0.8;
        let set = majority_vote_set(&rules, &[0.5], &ModelOutput::Scalar(mu)).unwrap();
        let (lo, hi) = match set.body {
            SetBody::Interval { lo, hi } => (lo, hi),
            _ => panic!("expected interval"),
        };
        // Vote pointwise over a y-grid and compare the covered range.
        let h = rules.len();
        let mut grid_lo = f64::INFINITY;
        let mut grid_hi = f64::NEG_INFINITY;
        let step = 0.001;
        let mut y = mu - 3.0;
        while y <= mu + 3.0 {
            let votes = widths.iter().filter(|&&w| (y - mu).abs() <= w).count();
            if 2 * votes > h {
                grid_lo = grid_lo.min(y);
                grid_hi = grid_hi.max(y);
            }
            y += step;
        }
        assert!((grid_lo - lo).abs() <= step + 1e-9);
        assert!((grid_hi - hi).abs() <= step + 1e-9);
    }

    #[test]
    fn adding_superset_rule_never_shrinks_merge() {
        for h in 1..8 {
            let widths: Vec<f64> = (0..h).map(|i| 0.5 + i as f64 * 0.3).collect();
            let rules: Vec<ConformalRule> = widths.iter().map(|&w| synthetic_rule(w)).collect();
            let before = majority_vote_set(&rules, &[0.5], &ModelOutput::Scalar(0.0))
                .unwrap()
                .threshold
                .unwrap();
            let mut extended = rules;
            extended.push(synthetic_rule(100.0));
            let after = majority_vote_set(&extended, &[0.5], &ModelOutput::Scalar(0.0))
                .unwrap()
                .threshold
                .unwrap();
            assert!(after >= before, "h = {h}: {after} < {before}");
        }
    }

    #[test]
    fn classification_vote_requires_strict_majority() {
        let calib = heteroskedastic_calib(30, 3);
        let mk = |thr: f64| {
            let mut rule = calibrate_conformal_tree(&calib, &TreeConfig::new(5, 1), 0.1).unwrap();
            rule.leaf_thresholds.insert(NodeId::ROOT, thr);
            rule
        };
        // Thresholds 0.75, 0.75, 0.1 over f = (0.5, 0.3, 0.2):
        // sets {0,1}, {0,1}, {} -> strict majority keeps {0, 1}.
        let rules = vec![mk(0.75), mk(0.75), mk(0.1)];
        let set = majority_vote_set(
            &rules,
            &[0.5],
            &ModelOutput::Probs(vec![0.5, 0.3, 0.2]),
        )
        .unwrap();
        assert_eq!(set.body, SetBody::Labels(vec![0, 1]));

        // Even h: exactly half the votes loses.
        let rules = vec![mk(0.75), mk(0.1)];
        let set = majority_vote_set(
            &rules,
            &[0.5],
            &ModelOutput::Probs(vec![0.5, 0.3, 0.2]),
        )
        .unwrap();
        assert_eq!(set.body, SetBody::Labels(vec![]));
    }

    #[test]
    fn feature_mask_prevents_splits_on_excluded_dims() {
        // Signal only along dim 0; forest restricted to dim 1 must not use it.
        let mut calib = Vec::new();
        for i in 0..100 {
            let x0 = (i as f64 + 0.5) / 100.0;
            let x1 = ((i * 37 + 11) % 100) as f64 / 100.0;
            let s = if x0 < 0.5 { 0.0 } else { 5.0 + x1 };
            calib.push(ScoredSample::new(vec![x0, x1], s).unwrap());
        }
        let rule =
            calibrate_conformal_tree_on_dims(&calib, &TreeConfig::new(10, 6), 0.1, &[1]).unwrap();
        for (node, _) in rule.tree.partition() {
            let mut cursor = Some(node);
            while let Some(id) = cursor {
                if let Some(dim) = rule.tree.split_direction(id) {
                    assert_eq!(dim, 1);
                }
                cursor = id.parent();
            }
        }
    }

    #[test]
    fn forest_is_deterministic_and_varied() {
        let calib = heteroskedastic_calib(200, 11);
        let config = ForestConfig::new(12, TreeConfig::new(10, 6), 0.1, 4242);
        let a = calibrate_forest(&calib, &config).unwrap();
        let b = calibrate_forest(&calib, &config).unwrap();
        assert_eq!(a.len(), b.len());
        let mut any_pair_differs = false;
        for (ra, rb) in a.iter().zip(&b) {
            assert!(ra.tree.partitions_equal(&rb.tree).unwrap());
            assert_eq!(ra.leaf_thresholds, rb.leaf_thresholds);
        }
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                if !a[i].tree.partitions_equal(&a[j].tree).unwrap() {
                    any_pair_differs = true;
                }
            }
        }
        assert!(any_pair_differs, "subsampled trees should not all agree");
    }

    #[test]
    fn forest_json_carries_config_and_rules() {
        let calib = heteroskedastic_calib(120, 8);
        let config = ForestConfig::new(4, TreeConfig::new(12, 4), 0.1, 7);
        let rules = calibrate_forest(&calib, &config).unwrap();
        let value = forest_to_json_value(&rules, &config).unwrap();
        assert_eq!(value["version"], "1");
        assert_eq!(value["config"]["num_trees"], 4);
        assert_eq!(value["config"]["subsample_fraction"], 0.7);
        assert_eq!(value["rules"].as_array().unwrap().len(), 4);
        for rule in value["rules"].as_array().unwrap() {
            assert!(rule["tree"]["nodes"].as_array().is_some());
        }
    }

    #[test]
    fn subsample_floor_is_enforced() {
        let calib = heteroskedastic_calib(20, 5);
        let mut config = ForestConfig::new(3, TreeConfig::new(15, 4), 0.1, 1);
        config.subsample_fraction = 0.5;
        assert!(matches!(
            calibrate_forest(&calib, &config),
            Err(Error::SubsampleTooSmall { size: 10, min_leaf: 15 })
        ));
    }

    #[test]
    fn half_width_lookup_matches_prediction() {
        let calib = heteroskedastic_calib(80, 2);
        let rule = calibrate_conformal_tree(&calib, &TreeConfig::new(10, 4), 0.1).unwrap();
        let w = interval_half_width(&rule, &[0.3]).unwrap();
        let set = predict_set(&rule, &[0.3], &ModelOutput::Scalar(0.0)).unwrap();
        assert_eq!(Some(w), set.threshold);
    }
}
