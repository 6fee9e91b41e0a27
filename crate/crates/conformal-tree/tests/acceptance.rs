//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see every line.
//! The Monte Carlo criteria use fixed seeds and 3-sigma bands, so they are
//! deterministic in practice and reproducible exactly.

use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;

use conformal_tree::conformal::{
    calibrate_conformal_tree, full_conformal_band, naive_uq_set, predict_set, predict_set_refit,
    ModelOutput, SetBody,
};
use conformal_tree::data::{derive_seed, derived_rng, generate_data1, sample_prob_vectors};
use conformal_tree::forest::{calibrate_forest, interval_half_width, majority_vote_set, ForestConfig};
use conformal_tree::sim::{
    run_simulation, run_simulation_detailed, run_verify, Check, ExperimentReport, Generator,
    Method, SimOptions, VerifyOptions,
};
use conformal_tree::tree::{
    fit_robust_tree_with_test_point, fit_tree_regressor, ScoredSample, TreeConfig,
};

use rand::Rng;

fn binomial_se(p: f64, count: usize) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p * (1.0 - p) / count as f64).sqrt()
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Scored Data 1 calibration samples under the harness's k-NN predictor.
fn data1_scored(n: usize, train_size: usize, seed: u64) -> Vec<ScoredSample> {
    let train = generate_data1(train_size, derive_seed(seed, 0, 0));
    let calib = generate_data1(n, derive_seed(seed, 1, 0));
    let knn = conformal_tree::data::KnnRegressor::fit(
        train.rescaled.clone(),
        train.response.as_ref().unwrap().real().unwrap().to_vec(),
    )
    .unwrap();
    calib
        .rescaled
        .iter()
        .zip(calib.response.as_ref().unwrap().real().unwrap())
        .map(|(x, &y)| {
            let mu = knn.predict(10, x).unwrap();
            ScoredSample::new(x.clone(), (y - mu).abs()).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: partition unchangeability
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_unchangeability() {
    let start = Instant::now();
    let report = run_verify(
        Check::Unchangeability,
        &VerifyOptions::new(500, 20, 8, 500, 20260301),
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "ACCEPTANCE 01 unchangeability: {} (frequency {:.4} >= {:.4} - {:.4}; {:.1}s)",
        verdict(report.pass),
        report.empirical,
        report.bound,
        report.band,
        elapsed
    );
    assert!(report.pass, "{:?}", report.lines);
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget is two minutes");
}

// ---------------------------------------------------------------------------
// Criteria 2 and 3 share the same simulations.
// ---------------------------------------------------------------------------

fn marginal_reports() -> &'static (ExperimentReport, ExperimentReport) {
    static REPORTS: OnceLock<(ExperimentReport, ExperimentReport)> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let run = |generator| {
            let opts = SimOptions::new(
                generator,
                500,
                50,
                0.1,
                TreeConfig::new(20, 8),
                vec![Method::Split, Method::Tree],
                20260302,
            );
            run_simulation(&opts).unwrap()
        };
        (run(Generator::Data1), run(Generator::Data2))
    })
}

#[test]
fn acceptance_02_marginal_coverage_windows() {
    let start = Instant::now();
    let (data1, data2) = marginal_reports();
    let elapsed = start.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    for (name, report) in [("Data 1", data1), ("Data 2", data2)] {
        let split = &report.methods[0];
        let tree = &report.methods[1];
        assert_eq!(split.method, Method::Split);
        assert_eq!(tree.method, Method::Tree);
        if !(0.89..=0.93).contains(&tree.empirical_coverage) {
            failures.push(format!(
                "{name}: tree coverage {:.4} outside [0.89, 0.93]",
                tree.empirical_coverage
            ));
        }
        if !(0.88..=0.92).contains(&split.empirical_coverage) {
            failures.push(format!(
                "{name}: split coverage {:.4} outside [0.88, 0.92]",
                split.empirical_coverage
            ));
        }
        println!(
            "  {name}: tree {:.4}, split {:.4}",
            tree.empirical_coverage, split.empirical_coverage
        );
    }
    println!(
        "ACCEPTANCE 02 marginal coverage windows: {} ({:.1}s)",
        verdict(failures.is_empty()),
        elapsed
    );
    assert!(elapsed < 300.0);
    // Known red: the leaf rank ceil((1-alpha)(m_k - 2) + 1) covers a fresh
    // point with probability about rank/(m_k + 1) ~ 0.9 - 1.2/m_k per leaf.
    // At n = 500, K = 8 the fitted trees use all eight leaves (m_k ~ 62), so
    // the achievable marginal coverage sits near 0.883 for any predictor,
    // below this criterion's 0.89 floor. The quoted reference values are
    // only reachable with the larger classical rank ceil((1-alpha)(m_k+1)),
    // which contradicts the rank pinned by the threshold contract here (see
    // acceptance_06). The theoretical guarantee itself holds with margin:
    // see acceptance_04 and the `marginal` verification check.
    assert!(
        failures.is_empty(),
        "marginal coverage windows missed: {failures:?}"
    );
}

#[test]
fn acceptance_03_adaptivity() {
    let (data1, data2) = marginal_reports();
    let mut failures = Vec::new();

    let tree1 = &data1.methods[1];
    if tree1.mean_size_low_region >= tree1.mean_size_high_region {
        failures.push(format!(
            "Data 1: width on (0, 0.25) = {:.3} not below width on (0.75, 1) = {:.3}",
            tree1.mean_size_low_region, tree1.mean_size_high_region
        ));
    }
    if (tree1.proportion_better_than_split - 0.614).abs() > 0.10 {
        failures.push(format!(
            "Data 1: proportion better {:.3} not within 0.614 +/- 0.10",
            tree1.proportion_better_than_split
        ));
    }

    let tree2 = &data2.methods[1];
    if tree2.mean_size_low_region <= tree2.mean_size_high_region {
        failures.push(format!(
            "Data 2: width ordering did not reverse ({:.3} vs {:.3})",
            tree2.mean_size_low_region, tree2.mean_size_high_region
        ));
    }
    if (tree2.proportion_better_than_split - 0.5).abs() > 0.10 {
        failures.push(format!(
            "Data 2: proportion better {:.3} not within 0.5 +/- 0.10",
            tree2.proportion_better_than_split
        ));
    }
    println!(
        "ACCEPTANCE 03 adaptivity: {} (Data 1: low {:.3} < high {:.3}, P.B. {:.3}; \
         Data 2: low {:.3} > high {:.3}, P.B. {:.3})",
        verdict(failures.is_empty()),
        tree1.mean_size_low_region,
        tree1.mean_size_high_region,
        tree1.proportion_better_than_split,
        tree2.mean_size_low_region,
        tree2.mean_size_high_region,
        tree2.proportion_better_than_split
    );
    assert!(failures.is_empty(), "{failures:?}");
}

// ---------------------------------------------------------------------------
// Criterion 4: group-conditional coverage
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_group_conditional_coverage() {
    let mut opts = VerifyOptions::new(500, 20, 8, 50, 20260304);
    opts.alpha = 0.1;
    let report = run_verify(Check::Conditional, &opts).unwrap();
    println!(
        "ACCEPTANCE 04 group-conditional coverage: {} (min leaf coverage {:.4}, bound {:.4} minus per-leaf band)",
        verdict(report.pass),
        report.empirical,
        report.bound
    );
    assert!(report.pass, "{:?}", report.lines);
}

// ---------------------------------------------------------------------------
// Criterion 5: delta(n, m) against the exact big-rational oracle
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_delta_exactness() {
    let report = run_verify(Check::Delta, &VerifyOptions::new(500, 20, 8, 1, 1)).unwrap();
    println!(
        "ACCEPTANCE 05 delta exactness: {} (max relative error {:.3e} <= 1e-10; closed-form bound dominates)",
        verdict(report.pass),
        report.empirical
    );
    assert!(report.pass, "{:?}", report.lines);
}

// ---------------------------------------------------------------------------
// Criterion 6: one-leaf reduction is bit-exact split conformal
// ---------------------------------------------------------------------------

/// Independent one-leaf implementation: selection sort plus a linear scan
/// for the smallest score whose left count reaches (1 - alpha)(n - 2) + 1,
/// compared in exact rational arithmetic.
fn independent_split_threshold(scores: &[f64], alpha: f64) -> f64 {
    let mut pool = scores.to_vec();
    let mut sorted = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if pool[i] < pool[best] {
                best = i;
            }
        }
        sorted.push(pool.swap_remove(best));
    }
    let n = sorted.len();
    let need = (BigRational::one() - BigRational::from_float(alpha).unwrap())
        * BigRational::from_integer(BigInt::from(n as i64 - 2))
        + BigRational::one();
    for &s in &sorted {
        let covered = sorted.iter().filter(|&&t| t <= s).count();
        if BigRational::from_integer(BigInt::from(covered)) >= need {
            return s;
        }
    }
    f64::INFINITY
}

#[test]
fn acceptance_06_split_conformal_reduction() {
    let mut rng = derived_rng(20260306, 0);
    let mut checked = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(10..300);
        let alpha = rng.random_range(0.02..0.5);
        let calib: Vec<ScoredSample> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..1.0);
                let s: f64 = rng.random_range(0.0..10.0);
                ScoredSample::new(vec![x], s).unwrap()
            })
            .collect();
        let rule = calibrate_conformal_tree(&calib, &TreeConfig::new(3, 1), alpha).unwrap();
        assert_eq!(rule.tree.num_leaves(), 1);
        let impl_thr = *rule.leaf_thresholds.values().next().unwrap();
        let scores: Vec<f64> = calib.iter().map(|s| s.score).collect();
        let oracle_thr = independent_split_threshold(&scores, alpha);
        assert_eq!(
            impl_thr.to_bits(),
            oracle_thr.to_bits(),
            "thresholds differ at n = {n}, alpha = {alpha}"
        );
        // The set construction agrees pointwise as well.
        let set = predict_set(&rule, &[0.5], &ModelOutput::Scalar(2.0)).unwrap();
        match set.body {
            SetBody::Interval { lo, hi } => {
                assert_eq!(lo.to_bits(), (2.0 - oracle_thr).to_bits());
                assert_eq!(hi.to_bits(), (2.0 + oracle_thr).to_bits());
            }
            _ => unreachable!(),
        }
        checked += 1;
    }
    println!("ACCEPTANCE 06 split-conformal reduction: PASS ({checked} instances bit-exact)");
}

// ---------------------------------------------------------------------------
// Criterion 7: closed-form full-conformal band vs the grid oracle
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_full_conformal_equivalence() {
    let config = TreeConfig::new(3, 3);
    let alpha = 0.2;
    let n = 12;
    let mut rng = derived_rng(20260307, 0);
    let mut kept = 0usize;
    let mut attempts = 0usize;
    while kept < 20 && attempts < 200 {
        attempts += 1;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|xi| {
                let step = if xi[0] < 0.5 { 0.0 } else { 3.0 };
                step + rng.random_range(-0.5..0.5)
            })
            .collect();

        let band = full_conformal_band(&x, &y, &config, alpha).unwrap();
        let base_tree = band.regressor.tree();

        // The shortcut's edges coincide with the refit band only where the
        // edge values are inliers of the query's leaf (otherwise the
        // augmented midrange chases the candidate response and the refit
        // band is wider). Querying the leaf with the largest response range
        // guarantees that regime, since the residual quantile cannot exceed
        // that leaf's half-range.
        let xq = {
            let mut best = (f64::NEG_INFINITY, vec![0.5]);
            for (_, cell) in base_tree.partition() {
                let leaf_y: Vec<f64> = x
                    .iter()
                    .zip(&y)
                    .filter(|(xi, _)| cell.contains(xi))
                    .map(|(_, &yi)| yi)
                    .collect();
                let lo = leaf_y.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = leaf_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let centre = (cell.lower(0) + cell.upper(0)) / 2.0;
                if hi - lo > best.0 {
                    best = (hi - lo, vec![centre]);
                }
            }
            best.1
        };
        let (lo, hi) = band.interval(&xq).unwrap();

        // Grid over [min y - range, max y + range], 2001 points.
        let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = y_max - y_min;
        // 2001 equispaced points over [min y - range, max y + range].
        let grid_lo_edge = y_min - span;
        let step = 3.0 * span / 2000.0;

        let mut unchanged = true;
        let mut grid_lo = f64::INFINITY;
        let mut grid_hi = f64::NEG_INFINITY;
        for g in 0..=2000 {
            let yg = grid_lo_edge + g as f64 * step;
            let mut aug_x = x.clone();
            aug_x.push(xq.clone());
            let mut aug_y = y.clone();
            aug_y.push(yg);
            let aug = fit_tree_regressor(&aug_x, &aug_y, &config).unwrap();
            if !aug.tree().partitions_equal(base_tree).unwrap() {
                unchanged = false;
                break;
            }
            // Augmented-fit residual ranks: include yg when its own residual
            // does not exceed the ceil((n+1)(1-alpha))-th smallest of the
            // n calibration residuals under the augmented fit.
            let mut scores: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(xi, &yi)| (yi - aug.predict(xi).unwrap()).abs())
                .collect();
            scores.sort_by(f64::total_cmp);
            let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
            let threshold = if rank > n {
                f64::INFINITY
            } else {
                scores[rank - 1]
            };
            let s_test = (yg - aug.predict(&xq).unwrap()).abs();
            if s_test <= threshold {
                grid_lo = grid_lo.min(yg);
                grid_hi = grid_hi.max(yg);
            }
        }
        if !unchanged {
            continue;
        }
        kept += 1;
        assert!(
            (grid_lo - lo).abs() <= step + 1e-9,
            "instance {attempts}: lower edge {grid_lo} vs {lo} (step {step})"
        );
        assert!(
            (grid_hi - hi).abs() <= step + 1e-9,
            "instance {attempts}: upper edge {grid_hi} vs {hi} (step {step})"
        );
    }
    println!(
        "ACCEPTANCE 07 full-conformal equivalence: {} ({kept} unchanged-partition instances of {attempts} matched within one grid step)",
        verdict(kept >= 20)
    );
    assert!(kept >= 20, "only {kept} usable instances in {attempts} attempts");
}

// ---------------------------------------------------------------------------
// Criterion 8: forest coverage bound and exact vote merge
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_forest() {
    let mut opts = VerifyOptions::new(500, 20, 8, 50, 20260308);
    opts.alpha = 0.1;
    let report = run_verify(Check::Forest, &opts).unwrap();

    // Exact merge check on a real forest: the voted interval equals the
    // (floor(h/2) + 1)-th largest half-width, and matches a brute-force
    // y-grid vote to grid resolution.
    let calib = data1_scored(500, 5000, 99);
    let config = ForestConfig::new(25, TreeConfig::new(20, 8), 0.1, 4711);
    let rules = calibrate_forest(&calib, &config).unwrap();
    let mut merges_checked = 0usize;
    for q in 0..40 {
        let xq = vec![(q as f64 + 0.5) / 40.0];
        let merged = majority_vote_set(&rules, &xq, &ModelOutput::Scalar(0.0)).unwrap();
        let merged_w = merged.threshold.unwrap();
        let mut widths: Vec<f64> = rules
            .iter()
            .map(|r| interval_half_width(r, &xq).unwrap())
            .collect();
        widths.sort_by(|a, b| b.total_cmp(a)); // descending
        let expect = widths[rules.len() / 2]; // (floor(h/2) + 1)-th largest
        assert_eq!(merged_w.to_bits(), expect.to_bits());

        let step = 0.004;
        let mut grid_hi = f64::NEG_INFINITY;
        let mut y = 0.0;
        while y < 10.0 {
            let votes = widths.iter().filter(|&&w| y <= w).count();
            if 2 * votes > rules.len() {
                grid_hi = grid_hi.max(y);
            }
            y += step;
        }
        assert!((grid_hi - merged_w).abs() <= step + 1e-12);
        merges_checked += 1;
    }
    println!(
        "ACCEPTANCE 08 forest: {} (coverage {:.4} >= {:.4} - {:.4}; {merges_checked} exact merges)",
        verdict(report.pass),
        report.empirical,
        report.bound,
        report.band
    );
    assert!(report.pass, "{:?}", report.lines);
}

// ---------------------------------------------------------------------------
// Criterion 9: query-aware refit coverage and agreement
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_refit_variant() {
    let alpha = 0.1;
    let (m, k_leaves) = (20usize, 8usize);
    let mut opts = SimOptions::new(
        Generator::Data1,
        500,
        20,
        alpha,
        TreeConfig::new(m, k_leaves),
        vec![Method::Split, Method::TreeRefit],
        20260309,
    );
    opts.test_size = 400;
    let report = run_simulation(&opts).unwrap();
    let refit = report
        .methods
        .iter()
        .find(|r| r.method == Method::TreeRefit)
        .unwrap();
    let total = report.trials * report.test_size;
    let bound = 1.0 - alpha - 2.0 / m as f64;
    let band = (3.0 * binomial_se(bound, total)).max(3.0 * refit.coverage_std_err);
    let coverage_ok = refit.empirical_coverage >= bound - band;

    // Agreement: whenever the query-aware partition matches the shared one,
    // the sets are identical.
    let calib = data1_scored(500, 5000, 31);
    let config = TreeConfig::new(m, k_leaves);
    let shared = calibrate_conformal_tree(&calib, &config, alpha).unwrap();
    let mut agreements = 0usize;
    let mut equal_partitions = 0usize;
    for q in 0..200 {
        let xq = vec![(q as f64 + 0.5) / 200.0];
        let refit_tree = fit_robust_tree_with_test_point(&calib, &xq, &config).unwrap();
        if refit_tree.partitions_equal(&shared.tree).unwrap() {
            equal_partitions += 1;
            let a = predict_set(&shared, &xq, &ModelOutput::Scalar(1.0)).unwrap();
            let b = predict_set_refit(&calib, &config, alpha, &xq, &ModelOutput::Scalar(1.0))
                .unwrap();
            assert_eq!(
                a.threshold.unwrap().to_bits(),
                b.threshold.unwrap().to_bits()
            );
            assert_eq!(a.body, b.body);
            agreements += 1;
        }
    }
    println!(
        "ACCEPTANCE 09 refit variant: {} (coverage {:.4} >= {:.4} - {:.4}; {agreements}/{equal_partitions} unchanged-partition queries identical)",
        verdict(coverage_ok && equal_partitions > 0),
        refit.empirical_coverage,
        bound,
        band
    );
    assert!(coverage_ok);
    assert!(equal_partitions > 100, "expected mostly unchanged partitions");
}

// ---------------------------------------------------------------------------
// Criterion 10: classification adaptivity against split and naive baselines
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_classification_adaptivity() {
    let alpha = 0.1;
    let n = 1500;
    let mut opts = SimOptions::new(
        Generator::Classif,
        n,
        20,
        alpha,
        TreeConfig::new(10, 20),
        vec![Method::Split, Method::Tree, Method::Naive],
        20260310,
    );
    opts.test_size = 1500;
    let report = run_simulation(&opts).unwrap();
    let split = &report.methods[0];
    let tree = &report.methods[1];
    let naive = &report.methods[2];

    let total = report.trials * report.test_size;
    let bound = (1.0 - alpha - report.delta).max(0.0);
    let band = (3.0 * binomial_se(1.0 - alpha, total)).max(3.0 * tree.coverage_std_err);
    let mut failures = Vec::new();
    if tree.empirical_coverage < bound - band {
        failures.push(format!(
            "coverage {:.4} below {:.4} - {:.4}",
            tree.empirical_coverage, bound, band
        ));
    }
    if tree.mean_size_low_region >= split.mean_size_low_region {
        failures.push(format!(
            "sharp-region mean size {:.3} not below split's {:.3}",
            tree.mean_size_low_region, split.mean_size_low_region
        ));
    }
    if tree.proportion_better_than_split < 0.5 {
        failures.push(format!(
            "only {:.3} of test points had same-or-smaller sets",
            tree.proportion_better_than_split
        ));
    }
    if naive.mean_width_or_set_size <= tree.mean_width_or_set_size {
        failures.push(format!(
            "naive mean size {:.3} not above tree's {:.3}",
            naive.mean_width_or_set_size, tree.mean_width_or_set_size
        ));
    }
    println!(
        "ACCEPTANCE 10 classification adaptivity: {} (coverage {:.4}; sharp {:.3} < split {:.3}; P.B. {:.3}; naive {:.3} > tree {:.3})",
        verdict(failures.is_empty()),
        tree.empirical_coverage,
        tree.mean_size_low_region,
        split.mean_size_low_region,
        tree.proportion_better_than_split,
        naive.mean_width_or_set_size,
        tree.mean_width_or_set_size
    );
    assert!(failures.is_empty(), "{failures:?}");
}

// ---------------------------------------------------------------------------
// Sanity: the naive baseline machinery used in criterion 10 is exercised
// directly once, so a regression there fails loudly rather than silently
// shifting the Monte Carlo comparison.
// ---------------------------------------------------------------------------

#[test]
fn naive_baseline_sampling_is_reproducible() {
    let f = vec![0.5, 0.3, 0.1, 0.06, 0.04];
    let mut rng_a = derived_rng(7, 3);
    let mut rng_b = derived_rng(7, 3);
    let a = sample_prob_vectors(&f, 11, 40.0, &mut rng_a);
    let b = sample_prob_vectors(&f, 11, 40.0, &mut rng_b);
    assert_eq!(a, b);
    let set = naive_uq_set(&a, 0.1).unwrap();
    assert!(!set.is_empty() && set.len() <= f.len());
    assert!(set.contains(&0));
}

// ---------------------------------------------------------------------------
// The verification CLI surfaces used above parse from their names.
// ---------------------------------------------------------------------------

#[test]
fn check_names_round_trip() {
    for name in ["unchangeability", "marginal", "conditional", "forest", "delta"] {
        let check = Check::from_str(name).unwrap();
        assert_eq!(check.to_string(), name);
    }
    assert!(Check::from_str("nonsense").is_err());
}

// ---------------------------------------------------------------------------
// The detailed simulation export used by criterion 4 keeps leaf-level counts
// consistent with the aggregate report.
// ---------------------------------------------------------------------------

#[test]
fn leaf_tables_align_with_aggregate() {
    let mut opts = SimOptions::new(
        Generator::Data1,
        200,
        3,
        0.1,
        TreeConfig::new(15, 4),
        vec![Method::Tree],
        5,
    );
    opts.test_size = 150;
    let (report, tables) = run_simulation_detailed(&opts).unwrap();
    let tree = &report.methods[0];
    let total_from_tables: usize = tables.iter().flat_map(|t| t.rows.iter()).map(|r| r.1).sum();
    assert_eq!(total_from_tables, opts.trials * opts.test_size);
    let covered_from_tables: usize =
        tables.iter().flat_map(|t| t.rows.iter()).map(|r| r.2).sum();
    let implied = covered_from_tables as f64 / total_from_tables as f64;
    assert!((implied - tree.empirical_coverage).abs() < 1e-12);
}
