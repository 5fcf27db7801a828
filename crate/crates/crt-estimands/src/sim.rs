//! Data-generating processes with controllable informative cluster
//! size, and a study runner that scores estimators against oracle
//! targets computed from the generated potential-outcome tables.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ClusterRecord, EstimateResult, Measure, ObservedDataset, OutcomeKind, PotentialClusterRecord,
    PotentialOutcomeDataset, Weighting,
};
use crate::engine::Link;
use crate::error::{Error, Result};
use crate::gee::{gee_fit, RhoMode};
use crate::iee::iee_estimate;
use crate::mixed::{glmm_logit_fit, lmm_fit, GlmmOptions};
use crate::numeric::{expit, KahanSum};
use crate::oracle::marginal_estimand;
use crate::summary::{
    cluster_specific_summary_estimate, marginal_summary_estimate, BoundaryPolicy,
};

/// One cluster-size stratum: all clusters drawn into it share a size,
/// a link-scale treatment effect, and optionally their own control level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStratum {
    pub size: usize,
    pub probability: f64,
    /// Treatment effect on the link scale (log odds for binary).
    pub effect: f64,
    /// Overrides the config-level control level when set.
    #[serde(default)]
    pub control_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_clusters: usize,
    pub strata: Vec<SizeStratum>,
    pub outcome_kind: OutcomeKind,
    /// Control-arm linear predictor: logit scale for binary outcomes,
    /// natural scale for continuous ones.
    pub control_level: f64,
    #[serde(default)]
    pub random_intercept_sd: f64,
    /// Within-cluster noise for continuous outcomes.
    #[serde(default = "default_residual_sd")]
    pub residual_sd: f64,
    pub seed: u64,
}

fn default_residual_sd() -> f64 {
    1.0
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 4 {
            return Err(Error::InvalidConfig(
                "n_clusters must be at least 4".into(),
            ));
        }
        if self.strata.is_empty() {
            return Err(Error::InvalidConfig("at least one stratum required".into()));
        }
        let mut total = 0.0;
        for s in &self.strata {
            if s.size < 1 {
                return Err(Error::InvalidConfig("stratum size must be >= 1".into()));
            }
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::InvalidConfig(
                    "stratum probability must lie in [0, 1]".into(),
                ));
            }
            total += s.probability;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "stratum probabilities sum to {total}, expected 1"
            )));
        }
        if self.random_intercept_sd < 0.0 {
            return Err(Error::InvalidConfig(
                "random_intercept_sd must be >= 0".into(),
            ));
        }
        if self.residual_sd <= 0.0 && self.outcome_kind == OutcomeKind::Continuous {
            return Err(Error::InvalidConfig("residual_sd must be > 0".into()));
        }
        Ok(())
    }

    /// Whether the config can induce informative cluster size: at least
    /// two strata differing in size and in effect or control level.
    pub fn is_informative(&self) -> bool {
        let sizes: Vec<usize> = self.strata.iter().map(|s| s.size).collect();
        let distinct_sizes = sizes.iter().any(|&s| s != sizes[0]);
        let first = &self.strata[0];
        let distinct_models = self.strata.iter().any(|s| {
            s.effect != first.effect || s.control_level != first.control_level
        });
        distinct_sizes && distinct_models
    }

    pub fn measure(&self) -> Measure {
        match self.outcome_kind {
            OutcomeKind::Binary => Measure::OddsRatio,
            OutcomeKind::Continuous => Measure::Difference,
        }
    }
}

/// Draw one replicate. Both potential outcomes per participant share the
/// cluster's latent intercept, so the observed outcome equals the
/// potential outcome under the realized assignment by construction.
/// Fully deterministic given (config.seed, replicate_index).
pub fn generate(
    config: &DgpConfig,
    replicate_index: u64,
) -> Result<(PotentialOutcomeDataset, ObservedDataset)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate_index + 1);
    let intercept_dist = Normal::new(0.0, config.random_intercept_sd.max(0.0))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let residual_dist = Normal::new(0.0, config.residual_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let m = config.n_clusters;
    let width = (m as f64).log10().floor() as usize + 1;
    let mut potential = Vec::with_capacity(m);
    for j in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut stratum = &config.strata[config.strata.len() - 1];
        for s in &config.strata {
            acc += s.probability;
            if u < acc {
                stratum = s;
                break;
            }
        }
        let intercept: f64 = if config.random_intercept_sd > 0.0 {
            intercept_dist.sample(&mut rng)
        } else {
            0.0
        };
        let lp0 = stratum.control_level.unwrap_or(config.control_level) + intercept;
        let lp1 = lp0 + stratum.effect;
        let mut y1 = Vec::with_capacity(stratum.size);
        let mut y0 = Vec::with_capacity(stratum.size);
        for _ in 0..stratum.size {
            // One latent draw per participant shared across both
            // potential worlds: zero effect then gives y1 = y0 exactly.
            match config.outcome_kind {
                OutcomeKind::Binary => {
                    let u: f64 = rng.random();
                    y1.push(f64::from(u < expit(lp1)));
                    y0.push(f64::from(u < expit(lp0)));
                }
                OutcomeKind::Continuous => {
                    let e = residual_dist.sample(&mut rng);
                    y1.push(lp1 + e);
                    y0.push(lp0 + e);
                }
            }
        }
        potential.push(PotentialClusterRecord {
            cluster_id: format!("c{j:0width$}"),
            y1,
            y0,
        });
    }

    // Balanced 1:1 assignment by shuffling cluster indices.
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut treated = vec![false; m];
    for &j in order.iter().take(m / 2) {
        treated[j] = true;
    }

    let observed = potential
        .iter()
        .zip(&treated)
        .map(|(c, &z)| ClusterRecord {
            cluster_id: c.cluster_id.clone(),
            treatment: z,
            outcomes: if z { c.y1.clone() } else { c.y0.clone() },
        })
        .collect();
    Ok((
        PotentialOutcomeDataset::new(potential, config.outcome_kind)?,
        ObservedDataset::new(observed, config.outcome_kind)?,
    ))
}

/// The estimators the study runner knows how to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    IeeUnweighted,
    IeeWeighted,
    SummaryMarginalWeighted,
    SummaryMarginalUnweighted,
    SummaryClusterWeighted,
    SummaryClusterUnweighted,
    GeeExchangeable,
    MixedLogistic,
    LinearMixed,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::IeeUnweighted => "iee_unweighted",
            EstimatorKind::IeeWeighted => "iee_weighted",
            EstimatorKind::SummaryMarginalWeighted => "summary_marginal_weighted",
            EstimatorKind::SummaryMarginalUnweighted => "summary_marginal_unweighted",
            EstimatorKind::SummaryClusterWeighted => "summary_cluster_weighted",
            EstimatorKind::SummaryClusterUnweighted => "summary_cluster_unweighted",
            EstimatorKind::GeeExchangeable => "gee_exchangeable",
            EstimatorKind::MixedLogistic => "mixed_logistic",
            EstimatorKind::LinearMixed => "linear_mixed",
        }
    }

    /// The oracle estimand this estimator is consistent for, when one
    /// exists in closed form.
    pub fn target(&self) -> Option<TargetKind> {
        match self {
            EstimatorKind::IeeUnweighted | EstimatorKind::SummaryMarginalWeighted => {
                Some(TargetKind::MarginalParticipant)
            }
            EstimatorKind::IeeWeighted | EstimatorKind::SummaryMarginalUnweighted => {
                Some(TargetKind::MarginalCluster)
            }
            EstimatorKind::SummaryClusterWeighted => Some(TargetKind::ClusterSpecificParticipant),
            EstimatorKind::SummaryClusterUnweighted => Some(TargetKind::ClusterSpecificCluster),
            _ => None,
        }
    }
}

/// The consistency-suite estimators: every Table-4 row applicable to the
/// outcome kind.
pub fn default_estimators(kind: OutcomeKind) -> Vec<EstimatorKind> {
    let mut set = vec![
        EstimatorKind::IeeUnweighted,
        EstimatorKind::SummaryMarginalWeighted,
        EstimatorKind::GeeExchangeable,
        EstimatorKind::SummaryClusterWeighted,
        EstimatorKind::IeeWeighted,
        EstimatorKind::SummaryMarginalUnweighted,
        EstimatorKind::SummaryClusterUnweighted,
    ];
    set.insert(
        3,
        match kind {
            OutcomeKind::Binary => EstimatorKind::MixedLogistic,
            OutcomeKind::Continuous => EstimatorKind::LinearMixed,
        },
    );
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MarginalParticipant,
    MarginalCluster,
    ClusterSpecificParticipant,
    ClusterSpecificCluster,
}

impl TargetKind {
    pub fn label(&self) -> &'static str {
        match self {
            TargetKind::MarginalParticipant => "marginal_participant",
            TargetKind::MarginalCluster => "marginal_cluster",
            TargetKind::ClusterSpecificParticipant => "cluster_specific_participant",
            TargetKind::ClusterSpecificCluster => "cluster_specific_cluster",
        }
    }

    const ALL: [TargetKind; 4] = [
        TargetKind::MarginalParticipant,
        TargetKind::MarginalCluster,
        TargetKind::ClusterSpecificParticipant,
        TargetKind::ClusterSpecificCluster,
    ];
}

/// Log odds of a within-cluster event count, with the same continuity
/// correction the cluster-specific summary estimator applies at the
/// 0/1 boundary, so oracle targets match what that estimator estimates.
fn boundary_safe_log_odds(events: f64, n: f64) -> f64 {
    if events <= 0.0 || events >= n {
        ((events + 0.5) / (n - events + 0.5)).ln()
    } else {
        (events / (n - events)).ln()
    }
}

fn cluster_specific_target(
    po: &PotentialOutcomeDataset,
    weighting: Weighting,
    measure: Measure,
) -> f64 {
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for c in po.clusters() {
        let n = c.y1.len() as f64;
        let w = match weighting {
            Weighting::ParticipantAverage => n,
            Weighting::ClusterAverage => 1.0,
        };
        let s1: f64 = c.y1.iter().sum();
        let s0: f64 = c.y0.iter().sum();
        let contrast = match measure {
            Measure::Difference => (s1 - s0) / n,
            Measure::OddsRatio => {
                boundary_safe_log_odds(s1, n) - boundary_safe_log_odds(s0, n)
            }
        };
        num.add(w * contrast);
        den.add(w);
    }
    let avg = num.value() / den.value();
    match measure {
        Measure::Difference => avg,
        Measure::OddsRatio => avg.exp(),
    }
}

/// Oracle value for a target on one replicate's potential table, on the
/// estimator's natural reporting scale.
pub fn oracle_target(
    po: &PotentialOutcomeDataset,
    target: TargetKind,
    measure: Measure,
) -> Result<f64> {
    match target {
        TargetKind::MarginalParticipant => {
            marginal_estimand(po, Weighting::ParticipantAverage, measure)
        }
        TargetKind::MarginalCluster => {
            marginal_estimand(po, Weighting::ClusterAverage, measure)
        }
        TargetKind::ClusterSpecificParticipant => Ok(cluster_specific_target(
            po,
            Weighting::ParticipantAverage,
            measure,
        )),
        TargetKind::ClusterSpecificCluster => Ok(cluster_specific_target(
            po,
            Weighting::ClusterAverage,
            measure,
        )),
    }
}

/// Run one estimator on observed data with the study-runner defaults
/// (Fay-Graubard sandwich, continuity correction at boundary clusters).
pub fn apply_estimator(
    kind: EstimatorKind,
    data: &ObservedDataset,
    measure: Measure,
) -> Result<EstimateResult> {
    let link = match measure {
        Measure::Difference => Link::Identity,
        Measure::OddsRatio => Link::Logit,
    };
    match kind {
        EstimatorKind::IeeUnweighted => {
            iee_estimate(data, Weighting::ParticipantAverage, measure)
        }
        EstimatorKind::IeeWeighted => iee_estimate(data, Weighting::ClusterAverage, measure),
        EstimatorKind::SummaryMarginalWeighted => {
            marginal_summary_estimate(data, Weighting::ParticipantAverage, measure)
        }
        EstimatorKind::SummaryMarginalUnweighted => {
            marginal_summary_estimate(data, Weighting::ClusterAverage, measure)
        }
        EstimatorKind::SummaryClusterWeighted => cluster_specific_summary_estimate(
            data,
            Weighting::ParticipantAverage,
            measure,
            BoundaryPolicy::ContinuityCorrection,
        ),
        EstimatorKind::SummaryClusterUnweighted => cluster_specific_summary_estimate(
            data,
            Weighting::ClusterAverage,
            measure,
            BoundaryPolicy::ContinuityCorrection,
        ),
        EstimatorKind::GeeExchangeable => gee_fit(data, link, RhoMode::Estimate),
        EstimatorKind::MixedLogistic => glmm_logit_fit(data, &GlmmOptions::default()),
        EstimatorKind::LinearMixed => lmm_fit(data),
    }
}

/// Per-estimator accumulation across replicates. Estimates are
/// summarized on the link scale; oracle comparisons on the natural
/// scale. Coverage scores each replicate's CI against that replicate's
/// finite-population truth; bias scores the mean estimate against the
/// across-replicate average truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub estimator: String,
    pub target: Option<String>,
    pub n_success: usize,
    pub n_fail: usize,
    pub mean_estimate: f64,
    pub mean_link_estimate: f64,
    pub empirical_se_link: f64,
    pub mean_model_se_link: f64,
    pub oracle_mean: Option<f64>,
    pub bias: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub replicates: usize,
    pub informative: bool,
    /// Across-replicate average oracle truths, natural scale.
    pub truths: BTreeMap<String, f64>,
    pub cells: Vec<StudyCell>,
}

struct ReplicateResult {
    truths: [Option<f64>; 4],
    // (natural, link, model se, ci_low, ci_high) per estimator
    estimates: Vec<Option<(f64, f64, f64, f64, f64)>>,
}

pub fn run_study(
    config: &DgpConfig,
    estimators: &[EstimatorKind],
    replicates: usize,
) -> Result<StudyReport> {
    config.validate()?;
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be >= 1".into()));
    }
    let measure = config.measure();
    let results: Vec<Result<ReplicateResult>> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let (po, obs) = generate(config, rep)?;
            let mut truths = [None; 4];
            for (k, t) in TargetKind::ALL.iter().enumerate() {
                truths[k] = oracle_target(&po, *t, measure).ok();
            }
            let estimates = estimators
                .iter()
                .map(|kind| {
                    apply_estimator(*kind, &obs, measure).ok().map(|r| {
                        (
                            r.estimate,
                            r.link_scale_estimate,
                            r.se_link,
                            r.ci_low,
                            r.ci_high,
                        )
                    })
                })
                .collect();
            Ok(ReplicateResult { truths, estimates })
        })
        .collect();

    let mut reps = Vec::with_capacity(replicates);
    for r in results {
        reps.push(r?);
    }

    let mut truths = BTreeMap::new();
    let mut truth_means = [None; 4];
    for (k, t) in TargetKind::ALL.iter().enumerate() {
        let vals: Vec<f64> = reps.iter().filter_map(|r| r.truths[k]).collect();
        if vals.len() == replicates {
            let mean = kahan_mean(&vals);
            truths.insert(t.label().to_string(), mean);
            truth_means[k] = Some(mean);
        }
    }

    let cells = estimators
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let obs: Vec<(usize, (f64, f64, f64, f64, f64))> = reps
                .iter()
                .enumerate()
                .filter_map(|(rep, r)| r.estimates[i].map(|e| (rep, e)))
                .collect();
            let n_success = obs.len();
            let links: Vec<f64> = obs.iter().map(|(_, e)| e.1).collect();
            let mean_link = kahan_mean(&links);
            let mean_nat = kahan_mean(&obs.iter().map(|(_, e)| e.0).collect::<Vec<_>>());
            let emp_var = if n_success > 1 {
                links
                    .iter()
                    .map(|l| (l - mean_link).powi(2))
                    .sum::<f64>()
                    / (n_success as f64 - 1.0)
            } else {
                0.0
            };
            let mean_se = kahan_mean(&obs.iter().map(|(_, e)| e.2).collect::<Vec<_>>());
            let target = kind.target();
            let (oracle_mean, bias) = match target {
                Some(t) => {
                    let om = truth_means[t as usize];
                    (om, om.map(|v| mean_nat - v))
                }
                None => (None, None),
            };
            let coverage = target.and_then(|t| {
                let covered: Vec<bool> = obs
                    .iter()
                    .filter_map(|(rep, e)| {
                        reps[*rep].truths[t as usize].map(|truth| e.3 <= truth && truth <= e.4)
                    })
                    .collect();
                if covered.is_empty() {
                    None
                } else {
                    Some(covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
                }
            });
            StudyCell {
                estimator: kind.label().to_string(),
                target: target.map(|t| t.label().to_string()),
                n_success,
                n_fail: replicates - n_success,
                mean_estimate: mean_nat,
                mean_link_estimate: mean_link,
                empirical_se_link: emp_var.sqrt(),
                mean_model_se_link: mean_se,
                oracle_mean,
                bias,
                coverage,
            }
        })
        .collect();

    Ok(StudyReport {
        replicates,
        informative: config.is_informative(),
        truths,
        cells,
    })
}

fn kahan_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut s = KahanSum::new();
    for &v in values {
        s.add(v);
    }
    s.value() / values.len() as f64
}
