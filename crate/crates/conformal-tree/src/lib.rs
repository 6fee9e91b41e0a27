//! Locally adaptive conformal prediction with robust dyadic regression trees.
//!
//! Split-conformal prediction turns a black-box model's point outputs into
//! sets with finite-sample coverage, but its single global quantile ignores
//! how the model's reliability varies across the input space. This crate
//! instead fits a range-targeting dyadic regression tree to the calibration
//! conformity scores, lets its leaves define groups, and calibrates a
//! quantile per group. Because splits live at dyadic midpoints and the split
//! criterion only reacts to within-leaf extremes, adding one more sample
//! rarely changes the partition, which is what keeps the group-conditional
//! guarantee intact up to an explicit penalty `delta(n, m)`.
//!
//! Modules:
//! - [`tree`]: dyadic boxes, the robust fitting loop, and a midrange
//!   tree regressor.
//! - [`conformal`]: per-leaf thresholds, prediction sets, `delta(n, m)`,
//!   the closed-form full-conformal band, and naive probability-mass sets.
//! - [`forest`]: subsampled tree ensembles merged by strict majority vote.
//! - [`data`]: synthetic generators, CSV ingestion with rescaling, k-NN.
//! - [`sim`]: the Monte Carlo experiment and verification harness behind the
//!   CLI's `simulate` and `verify` commands.

pub mod conformal;
pub mod data;
pub mod error;
pub mod forest;
pub mod sim;
pub mod tree;

pub use conformal::{
    calibrate_conformal_tree, delta_bound, leaf_threshold, naive_uq_set, predict_set,
    predict_set_refit, CalibrationMode, ConformalRule, CoverageBounds, ModelOutput, PredictionSet,
    ScoreKind, SetBody,
};
pub use error::{Error, Result};
pub use forest::{calibrate_forest, majority_vote_set, ForestConfig};
pub use tree::{
    fit_robust_tree, fit_robust_tree_with_test_point, DyadicBox, DyadicTree, NodeId, ScoredSample,
    TreeConfig,
};
