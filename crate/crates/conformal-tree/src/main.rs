//! Command-line driver: calibrate rules from CSV data, predict sets for new
//! points, run the Monte Carlo simulation harness, and verify the
//! finite-sample guarantees.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use conformal_tree::conformal::{
    predict_set, predict_set_refit, CalibrationMode, ConformalRule, CoverageBounds, ModelOutput,
    PredictionSet, ScoreKind, SetBody,
};
use conformal_tree::data::{load_csv, CsvSchema, Dataset, FeatureMeta, ResponseData};
use conformal_tree::error::{Error, Result};
use conformal_tree::sim::{
    run_simulation, run_verify, Check, Generator, Method, SimOptions, VerifyOptions,
};
use conformal_tree::tree::{ScoredSample, TreeConfig};

#[derive(Parser)]
#[command(
    name = "conformal-tree",
    version,
    about = "Locally adaptive conformal prediction with robust dyadic trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a conformal rule on a CSV dataset and write it as JSON.
    Calibrate {
        /// Calibration CSV with a header row.
        #[arg(long)]
        data: PathBuf,
        /// JSON schema describing column roles.
        #[arg(long)]
        schema: PathBuf,
        /// Miscoverage level.
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Minimum samples per leaf (m).
        #[arg(long = "min-leaf")]
        min_leaf: usize,
        /// Maximum number of leaves (K).
        #[arg(long = "max-leaves")]
        max_leaves: usize,
        /// Minimum range-reduction rate.
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        /// Per-dimension split depth cap.
        #[arg(long = "max-depth-per-dim", default_value_t = 20)]
        max_depth_per_dim: u32,
        /// "shared": one tree for all queries; "refit": refit per query.
        #[arg(long, default_value = "shared")]
        mode: String,
        /// Output rule path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce prediction sets for the rows of a CSV file under a rule.
    Predict {
        #[arg(long)]
        rule: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo comparison of methods on a synthetic generator.
    Simulate {
        /// data1 | data2 | classif
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long = "min-leaf", default_value_t = 20)]
        min_leaf: usize,
        #[arg(long = "max-leaves", default_value_t = 8)]
        max_leaves: usize,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        /// Comma-separated subset of split,tree,tree-refit,forest,naive.
        #[arg(long, default_value = "split,tree")]
        methods: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "test-size", default_value_t = 1000)]
        test_size: usize,
        /// Size of the independent draw the built-in k-NN is fitted on
        /// (defaults to the generator's standard setting).
        #[arg(long = "train-size")]
        train_size: Option<usize>,
        #[arg(long = "knn-k", default_value_t = 10)]
        knn_k: usize,
        /// Write the full report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one finite-sample verification check.
    Verify {
        /// unchangeability | marginal | conditional | forest | delta
        #[arg(long)]
        check: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long = "K", default_value_t = 8)]
        max_leaves: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value = "data1")]
        generator: String,
    },
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// CT_THREADS caps the worker pool when set.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("CT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate {
            data,
            schema,
            alpha,
            min_leaf,
            max_leaves,
            eta,
            max_depth_per_dim,
            mode,
            out,
        } => cmd_calibrate(
            &data,
            &schema,
            alpha,
            min_leaf,
            max_leaves,
            eta,
            max_depth_per_dim,
            &mode,
            &out,
        ),
        Command::Predict { rule, data, out } => cmd_predict(&rule, &data, &out),
        Command::Simulate {
            generator,
            n,
            trials,
            alpha,
            min_leaf,
            max_leaves,
            eta,
            methods,
            seed,
            test_size,
            train_size,
            knn_k,
            out,
        } => cmd_simulate(
            &generator, n, trials, alpha, min_leaf, max_leaves, eta, &methods, seed, test_size,
            train_size, knn_k, out.as_deref(),
        ),
        Command::Verify {
            check,
            n,
            m,
            max_leaves,
            trials,
            seed,
            alpha,
            generator,
        } => cmd_verify(&check, n, m, max_leaves, trials, seed, alpha, &generator),
    }
}

// ---------------------------------------------------------------------------
// Rule files: the core rule JSON plus what prediction needs later (score
// kind, rescaling bounds, the schema echo, and the calibration samples when
// the rule refits per query).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CalibRow {
    x: Vec<f64>,
    s: f64,
}

struct RuleFile {
    rule: ConformalRule,
    score_kind: ScoreKind,
    feature_meta: Vec<FeatureMeta>,
    schema: CsvSchema,
    calibration: Option<Vec<CalibRow>>,
}

impl RuleFile {
    fn write(&self, path: &Path) -> Result<()> {
        let mut value = self.rule.to_json_value()?;
        let obj = value.as_object_mut().expect("rule json is an object");
        obj.insert("score_kind".into(), serde_json::to_value(self.score_kind)?);
        obj.insert(
            "feature_meta".into(),
            serde_json::to_value(&self.feature_meta)?,
        );
        obj.insert("schema".into(), serde_json::to_value(&self.schema)?);
        if let Some(rows) = &self.calibration {
            obj.insert("calibration".into(), serde_json::to_value(rows)?);
        }
        std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
        Ok(())
    }

    fn read(path: &Path) -> Result<RuleFile> {
        let text = std::fs::read_to_string(path)?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Schema("rule file is not a JSON object".into()))?;
        let score_kind: ScoreKind = serde_json::from_value(
            obj.remove("score_kind")
                .ok_or_else(|| Error::Schema("rule file lacks score_kind".into()))?,
        )?;
        let feature_meta: Vec<FeatureMeta> = serde_json::from_value(
            obj.remove("feature_meta")
                .ok_or_else(|| Error::Schema("rule file lacks feature_meta".into()))?,
        )?;
        let schema: CsvSchema = serde_json::from_value(
            obj.remove("schema")
                .ok_or_else(|| Error::Schema("rule file lacks schema".into()))?,
        )?;
        let calibration: Option<Vec<CalibRow>> = match obj.remove("calibration") {
            Some(v) => Some(serde_json::from_value(v)?),
            None => None,
        };
        let rule = ConformalRule::from_json_value(value)?;
        Ok(RuleFile {
            rule,
            score_kind,
            feature_meta,
            schema,
            calibration,
        })
    }
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

/// Conformity scores implied by the columns a dataset carries.
fn scores_from_dataset(ds: &Dataset) -> Result<(Vec<ScoredSample>, ScoreKind)> {
    match (&ds.response, &ds.prob_vectors, &ds.predictions) {
        (Some(ResponseData::Label(labels)), Some(probs), _) => {
            let mut out = Vec::with_capacity(ds.n());
            for ((x, &y), p) in ds.rescaled.iter().zip(labels).zip(probs) {
                if y >= p.len() {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        len: p.len(),
                    });
                }
                out.push(ScoredSample::new(x.clone(), 1.0 - p[y])?);
            }
            Ok((out, ScoreKind::ComplementProbability))
        }
        (Some(ResponseData::Real(ys)), _, Some(mu)) => {
            let mut out = Vec::with_capacity(ds.n());
            for ((x, &y), &m) in ds.rescaled.iter().zip(ys).zip(mu) {
                out.push(ScoredSample::new(x.clone(), (y - m).abs())?);
            }
            Ok((out, ScoreKind::AbsoluteResidual))
        }
        (Some(ResponseData::Real(_)), _, None) => Err(Error::Schema(
            "regression calibration needs a prediction column in the schema".into(),
        )),
        _ => Err(Error::Schema(
            "calibration needs a response column plus either a prediction column \
             or probability columns"
                .into(),
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    data: &Path,
    schema_path: &Path,
    alpha: f64,
    min_leaf: usize,
    max_leaves: usize,
    eta: f64,
    max_depth_per_dim: u32,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let mode = match mode {
        "shared" => CalibrationMode::SharedTree,
        "refit" => CalibrationMode::RefitPerQuery,
        other => {
            return Err(Error::InvalidConfig(format!(
                "mode must be 'shared' or 'refit', got '{other}'"
            )))
        }
    };
    let schema = CsvSchema::from_path(schema_path)?;
    let ds = load_csv(data, &schema)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let (samples, score_kind) = scores_from_dataset(&ds)?;
    let config = TreeConfig {
        min_samples_per_leaf: min_leaf,
        max_leaves,
        min_range_reduction_rate: eta,
        max_depth_per_dimension: max_depth_per_dim,
    };
    let mut rule = conformal_tree::conformal::calibrate_conformal_tree(&samples, &config, alpha)?;
    rule.mode = mode;

    println!(
        "calibrated on n = {} points, d = {}: {} leaves, alpha = {}, mode = {}",
        samples.len(),
        ds.d(),
        rule.tree.num_leaves(),
        alpha,
        match mode {
            CalibrationMode::SharedTree => "shared_tree",
            CalibrationMode::RefitPerQuery => "refit_per_query",
        }
    );
    println!("delta(n, m) = {:.6}", rule.delta);
    let bounds = CoverageBounds::new(alpha, samples.len(), min_leaf)?;
    println!(
        "coverage bounds: shared [{:.4}, {:.4}], refit [{:.4}, {:.4}]",
        bounds.lower, bounds.upper, bounds.refit_lower, bounds.refit_upper
    );
    for (leaf, _) in rule.tree.partition() {
        println!(
            "leaf ({}, {}): count = {}, threshold = {}",
            leaf.depth, leaf.pos, rule.leaf_counts[&leaf], rule.leaf_thresholds[&leaf]
        );
    }

    let calibration = match mode {
        CalibrationMode::RefitPerQuery => Some(
            samples
                .iter()
                .map(|s| CalibRow {
                    x: s.x.clone(),
                    s: s.score,
                })
                .collect(),
        ),
        CalibrationMode::SharedTree => None,
    };
    RuleFile {
        rule,
        score_kind,
        feature_meta: ds.feature_meta.clone(),
        schema,
        calibration,
    }
    .write(out)?;
    println!("wrote rule to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn cmd_predict(rule_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let rule_file = RuleFile::read(rule_path)?;
    let schema = rule_file.schema.without_response();
    let ds = load_csv(data, &schema)?;

    let classification = rule_file.score_kind == ScoreKind::ComplementProbability;
    if classification && ds.prob_vectors.is_none() {
        return Err(Error::Schema(
            "classification rule needs the probability columns in the test file".into(),
        ));
    }
    if !classification && ds.predictions.is_none() {
        return Err(Error::Schema(
            "regression rule needs the prediction column in the test file".into(),
        ));
    }

    let mut writer = csv::Writer::from_path(out)?;
    if classification {
        writer.write_record(["point_id", "leaf_l", "leaf_k", "threshold", "labels", "vacuous"])?;
    } else {
        writer.write_record([
            "point_id",
            "leaf_l",
            "leaf_k",
            "threshold",
            "lo",
            "hi",
            "vacuous",
        ])?;
    }

    let config = rule_file.rule.tree.config().clone();
    let alpha = rule_file.rule.alpha;
    let refit_samples: Option<Vec<ScoredSample>> = match rule_file.rule.mode {
        CalibrationMode::RefitPerQuery => {
            let rows = rule_file.calibration.as_ref().ok_or_else(|| {
                Error::Schema("refit rule file lacks its calibration samples".into())
            })?;
            Some(
                rows.iter()
                    .map(|r| ScoredSample::new(r.x.clone(), r.s))
                    .collect::<Result<_>>()?,
            )
        }
        CalibrationMode::SharedTree => None,
    };

    let mut clamped_points = 0usize;
    for (i, raw) in ds.x_raw.iter().enumerate() {
        let mut x = Vec::with_capacity(raw.len());
        let mut clamped = false;
        for (&v, meta) in raw.iter().zip(&rule_file.feature_meta) {
            let (t, c) = meta.rescale(v);
            clamped |= c;
            x.push(t);
        }
        clamped_points += clamped as usize;

        let output = if classification {
            ModelOutput::Probs(ds.prob_vectors.as_ref().unwrap()[i].clone())
        } else {
            ModelOutput::Scalar(ds.predictions.as_ref().unwrap()[i])
        };
        let set: PredictionSet = match &refit_samples {
            Some(samples) => predict_set_refit(samples, &config, alpha, &x, &output)?,
            None => predict_set(&rule_file.rule, &x, &output)?,
        };
        let leaf = set.leaf.expect("single-rule sets carry their leaf");
        let threshold = format_float(set.threshold.expect("single-rule sets carry a threshold"));
        match &set.body {
            SetBody::Interval { lo, hi } => writer.write_record([
                i.to_string(),
                leaf.depth.to_string(),
                leaf.pos.to_string(),
                threshold,
                format_float(*lo),
                format_float(*hi),
                set.vacuous.to_string(),
            ])?,
            SetBody::Labels(labels) => {
                let names = rule_file.schema.prob_labels.as_ref();
                let joined = labels
                    .iter()
                    .map(|&l| match names {
                        Some(n) if l < n.len() => n[l].clone(),
                        _ => l.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(";");
                writer.write_record([
                    i.to_string(),
                    leaf.depth.to_string(),
                    leaf.pos.to_string(),
                    threshold,
                    joined,
                    set.vacuous.to_string(),
                ])?
            }
        }
    }
    writer.flush()?;
    if clamped_points > 0 {
        eprintln!(
            "warning: {clamped_points} test point(s) fell outside the calibration range and were clamped"
        );
    }
    println!("wrote {} prediction set(s) to {}", ds.n(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    generator: &str,
    n: usize,
    trials: usize,
    alpha: f64,
    min_leaf: usize,
    max_leaves: usize,
    eta: f64,
    methods: &str,
    seed: u64,
    test_size: usize,
    train_size: Option<usize>,
    knn_k: usize,
    out: Option<&Path>,
) -> Result<()> {
    let generator = Generator::from_str(generator)?;
    let methods: Vec<Method> = methods
        .split(',')
        .filter(|s| !s.is_empty())
        .map(Method::from_str)
        .collect::<Result<_>>()?;
    let tree = TreeConfig {
        min_samples_per_leaf: min_leaf,
        max_leaves,
        min_range_reduction_rate: eta,
        max_depth_per_dimension: 20,
    };
    let mut opts = SimOptions::new(generator, n, trials, alpha, tree, methods, seed);
    opts.test_size = test_size;
    opts.knn_k = knn_k;
    if let Some(t) = train_size {
        opts.train_size = t;
    }
    let report = run_simulation(&opts)?;

    println!(
        "generator = {}, n = {}, trials = {}, test = {}, alpha = {}, m = {}, K = {}",
        report.generator,
        report.n,
        report.trials,
        report.test_size,
        report.alpha,
        report.tree_config.min_samples_per_leaf,
        report.tree_config.max_leaves
    );
    println!(
        "delta(n, m) = {:.4}; theoretical coverage window [{:.4}, {:.4}]",
        report.delta, report.coverage_bounds.lower, report.coverage_bounds.upper
    );
    println!(
        "{:<11} {:>9} {:>9} {:>7} {:>9} {:>9} {:>9}",
        "method", "coverage", "size", "P.B.", "low-x", "high-x", "secs"
    );
    for m in &report.methods {
        println!(
            "{:<11} {:>9.4} {:>9.4} {:>7.3} {:>9.4} {:>9.4} {:>9.2}",
            m.method.to_string(),
            m.empirical_coverage,
            m.mean_width_or_set_size,
            m.proportion_better_than_split,
            m.mean_size_low_region,
            m.mean_size_high_region,
            m.runtime_seconds
        );
    }
    if let Some(path) = out {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    check: &str,
    n: usize,
    m: usize,
    max_leaves: usize,
    trials: usize,
    seed: u64,
    alpha: f64,
    generator: &str,
) -> Result<()> {
    let check = Check::from_str(check)?;
    let mut opts = VerifyOptions::new(n, m, max_leaves, trials, seed);
    opts.alpha = alpha;
    opts.generator = Generator::from_str(generator)?;
    let report = run_verify(check, &opts)?;
    println!("check = {}", report.check);
    for line in &report.lines {
        if !line.is_empty() {
            println!("  {line}");
        }
    }
    let fmt = |v: f64| {
        if v != 0.0 && v.abs() < 1e-3 {
            format!("{v:.6e}")
        } else {
            format!("{v:.6}")
        }
    };
    println!(
        "empirical = {}, bound = {}, band = {} -> {}",
        fmt(report.empirical),
        fmt(report.bound),
        fmt(report.band),
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}
