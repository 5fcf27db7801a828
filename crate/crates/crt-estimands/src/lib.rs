//! Causal estimands and estimators for cluster-randomised trials.
//!
//! The library separates three layers:
//! - oracle estimand values computed from full potential-outcome tables
//!   ([`oracle`]), spanning the marginal vs cluster-specific and
//!   participant- vs cluster-average axes for difference and odds-ratio
//!   measures;
//! - estimators that see only observed data: independence estimating
//!   equations ([`iee`]), cluster-level summary regressions
//!   ([`summary`]), GEE with exchangeable working correlation ([`gee`]),
//!   and mixed-effects models ([`mixed`]), with cluster-robust or
//!   model-based variances ([`engine`]);
//! - simulation machinery that scores estimators against the oracle
//!   ([`sim`]) and a CSV/JSON reporting layer ([`report`]).

pub mod data;
pub mod engine;
pub mod error;
pub mod gee;
pub mod iee;
pub mod mixed;
pub mod numeric;
pub mod oracle;
pub mod report;
pub mod sim;
pub mod summary;

pub use data::{
    fixture_ex1, fixture_po1, AveragingF, ClusterRecord, ClusterSummary, EstimandSpec,
    EstimateResult, Margin, Measure, ObservedDataset, OutcomeKind, PotentialClusterRecord,
    PotentialOutcomeDataset, VarianceMethod, Weighting,
};
pub use engine::{Link, SandwichSpec};
pub use error::{Error, Result};
pub use gee::{gee_fit, gee_fit_with, RhoMode};
pub use iee::{iee_estimate, iee_estimate_with};
pub use mixed::{
    glmm_logit_fit, implied_lmm_target, lmm_fit, lmm_fit_with, GlmmOptions, IccMode, LmmMethod,
    SigmaMode, VarianceComponents,
};
pub use oracle::{
    cluster_specific_estimand, estimand_value, marginal_estimand, precision_weighted_estimand,
};
pub use report::{
    analyze, load_observed_csv, load_potential_csv, load_potential_csv_as, parse_json,
    render_json, render_text, AnalysisGrid, AnalysisRow, AnalyzeOptions,
};
pub use sim::{
    default_estimators, generate, run_study, DgpConfig, EstimatorKind, SizeStratum, StudyReport,
    TargetKind,
};
pub use summary::{
    cluster_specific_summary_estimate, marginal_summary_estimate, BoundaryPolicy,
};
