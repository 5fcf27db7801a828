//! Core domain types: observed and potential-outcome datasets, cluster
//! summaries, estimand specifications, and the common estimate/result
//! shape shared by every estimator.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::numeric::{logit, KahanSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

/// One cluster of an observed trial: cluster-level treatment and the
/// per-participant outcomes recorded in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub treatment: bool,
    pub outcomes: Vec<f64>,
}

/// Observed trial data, grouped by cluster. `treatment` is constant
/// within a cluster by construction (cluster-level randomisation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDataset {
    clusters: Vec<ClusterRecord>,
    outcome_kind: OutcomeKind,
}

fn check_binary(cluster_id: &str, values: &[f64]) -> Result<()> {
    for &v in values {
        if v != 0.0 && v != 1.0 {
            return Err(Error::NonBinaryOutcome {
                cluster_id: cluster_id.to_string(),
                value: v,
            });
        }
    }
    Ok(())
}

impl ObservedDataset {
    pub fn new(clusters: Vec<ClusterRecord>, outcome_kind: OutcomeKind) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::NoData);
        }
        let mut seen = HashSet::new();
        for c in &clusters {
            if c.outcomes.is_empty() {
                return Err(Error::EmptyCluster {
                    cluster_id: c.cluster_id.clone(),
                });
            }
            if !seen.insert(c.cluster_id.clone()) {
                return Err(Error::DuplicateCluster {
                    cluster_id: c.cluster_id.clone(),
                });
            }
            for &v in &c.outcomes {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!("non-finite outcome in cluster '{}'", c.cluster_id),
                    });
                }
            }
            if outcome_kind == OutcomeKind::Binary {
                check_binary(&c.cluster_id, &c.outcomes)?;
            }
        }
        Ok(Self {
            clusters,
            outcome_kind,
        })
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    /// Total number of clusters M.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of participants N.
    pub fn n_participants(&self) -> usize {
        self.clusters.iter().map(|c| c.outcomes.len()).sum()
    }

    /// Estimation calls need at least one cluster in each arm.
    pub fn require_both_arms(&self) -> Result<()> {
        let treated = self.clusters.iter().filter(|c| c.treatment).count();
        if treated == 0 || treated == self.clusters.len() {
            return Err(Error::SingleArm);
        }
        Ok(())
    }

    /// Keep only clusters whose size lies in `[min, max]`.
    pub fn filter_by_size(&self, min: Option<usize>, max: Option<usize>) -> Result<Self> {
        let clusters: Vec<ClusterRecord> = self
            .clusters
            .iter()
            .filter(|c| {
                let n = c.outcomes.len();
                min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m)
            })
            .cloned()
            .collect();
        if clusters.is_empty() {
            return Err(Error::NoData);
        }
        Self::new(clusters, self.outcome_kind)
    }
}

/// One cluster of a complete potential-outcome table: both potential
/// outcomes for every participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialClusterRecord {
    pub cluster_id: String,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeDataset {
    clusters: Vec<PotentialClusterRecord>,
    outcome_kind: OutcomeKind,
}

impl PotentialOutcomeDataset {
    pub fn new(clusters: Vec<PotentialClusterRecord>, outcome_kind: OutcomeKind) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::NoData);
        }
        let mut seen = HashSet::new();
        for c in &clusters {
            if c.y1.is_empty() {
                return Err(Error::EmptyCluster {
                    cluster_id: c.cluster_id.clone(),
                });
            }
            if c.y1.len() != c.y0.len() {
                return Err(Error::PotentialLengthMismatch {
                    cluster_id: c.cluster_id.clone(),
                    n1: c.y1.len(),
                    n0: c.y0.len(),
                });
            }
            if !seen.insert(c.cluster_id.clone()) {
                return Err(Error::DuplicateCluster {
                    cluster_id: c.cluster_id.clone(),
                });
            }
            if outcome_kind == OutcomeKind::Binary {
                check_binary(&c.cluster_id, &c.y1)?;
                check_binary(&c.cluster_id, &c.y0)?;
            }
        }
        Ok(Self {
            clusters,
            outcome_kind,
        })
    }

    pub fn clusters(&self) -> &[PotentialClusterRecord] {
        &self.clusters
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_participants(&self) -> usize {
        self.clusters.iter().map(|c| c.y1.len()).sum()
    }
}

/// Per-cluster observed summary: size, mean outcome, and the log-odds
/// when it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: String,
    pub treatment: bool,
    pub n: usize,
    pub mean: f64,
    /// Present iff the outcome is binary and the mean lies strictly in (0,1).
    pub log_odds: Option<f64>,
}

/// One summary per cluster, in dataset order.
pub fn summarize_clusters(data: &ObservedDataset) -> Vec<ClusterSummary> {
    data.clusters()
        .iter()
        .map(|c| {
            let n = c.outcomes.len();
            let mut acc = KahanSum::new();
            for &y in &c.outcomes {
                acc.add(y);
            }
            let mean = acc.value() / n as f64;
            let log_odds = if data.outcome_kind() == OutcomeKind::Binary
                && mean > 0.0
                && mean < 1.0
            {
                Some(logit(mean))
            } else {
                None
            };
            ClusterSummary {
                cluster_id: c.cluster_id.clone(),
                treatment: c.treatment,
                n,
                mean,
                log_odds,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    Marginal,
    ClusterSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    ParticipantAverage,
    ClusterAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Difference,
    OddsRatio,
}

/// Averaging function for cluster-specific odds ratios: average the log
/// odds ratios then back-transform, or average the odds ratios directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingF {
    #[default]
    Log,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub margin: Margin,
    pub weighting: Weighting,
    pub measure: Measure,
    pub averaging_f: AveragingF,
}

impl EstimandSpec {
    pub fn new(margin: Margin, weighting: Weighting, measure: Measure) -> Self {
        Self {
            margin,
            weighting,
            measure,
            averaging_f: AveragingF::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    ModelBased,
    Hc0,
    FayGraubard { b: f64 },
}

/// Point estimate with link-scale inference, on the estimator's natural
/// reporting scale (odds ratio after exponentiation, difference as-is).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimate: f64,
    pub link_scale_estimate: f64,
    pub se_link: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    /// Degrees of freedom for the t reference; `None` means normal quantiles.
    pub df: Option<f64>,
    pub variance_method: VarianceMethod,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateResult {
    /// Build a result from a link-scale estimate and variance, using a
    /// t reference with `df` degrees of freedom (normal when `df` is None).
    pub fn from_link(
        link_estimate: f64,
        var_link: f64,
        df: Option<f64>,
        measure: Measure,
        variance_method: VarianceMethod,
        diagnostics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if var_link < 0.0 || !var_link.is_finite() {
            return Err(Error::InestimableVariance {
                reason: format!("variance {var_link} on link scale"),
            });
        }
        let se = var_link.sqrt();
        let (q, p_value) = reference_quantile_and_p(link_estimate, se, df)?;
        let (lo, hi) = (link_estimate - q * se, link_estimate + q * se);
        let (estimate, ci_low, ci_high) = match measure {
            Measure::Difference => (link_estimate, lo, hi),
            Measure::OddsRatio => (link_estimate.exp(), lo.exp(), hi.exp()),
        };
        Ok(Self {
            estimate,
            link_scale_estimate: link_estimate,
            se_link: se,
            ci_low,
            ci_high,
            p_value,
            df,
            variance_method,
            diagnostics,
        })
    }
}

fn reference_quantile_and_p(est: f64, se: f64, df: Option<f64>) -> Result<(f64, f64)> {
    let p_two_sided = |cdf_abs: f64| (2.0 * (1.0 - cdf_abs)).clamp(0.0, 1.0);
    match df {
        Some(d) => {
            if d <= 0.0 {
                return Err(Error::InestimableVariance {
                    reason: format!("{d} degrees of freedom"),
                });
            }
            let t = StudentsT::new(0.0, 1.0, d).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let q = t.inverse_cdf(0.975);
            let p = if se > 0.0 {
                p_two_sided(t.cdf((est / se).abs()))
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            Ok((q, p))
        }
        None => {
            let n = Normal::new(0.0, 1.0).unwrap();
            let q = n.inverse_cdf(0.975);
            let p = if se > 0.0 {
                p_two_sided(n.cdf((est / se).abs()))
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            Ok((q, p))
        }
    }
}

/// EX1 fixture used throughout the test suites: two treated clusters
/// (means 0.5, 0.75) and two control clusters (means 0.5, 0.25).
pub fn fixture_ex1() -> ObservedDataset {
    ObservedDataset::new(
        vec![
            ClusterRecord {
                cluster_id: "A".into(),
                treatment: true,
                outcomes: vec![1.0, 0.0],
            },
            ClusterRecord {
                cluster_id: "B".into(),
                treatment: true,
                outcomes: vec![1.0, 1.0, 1.0, 0.0],
            },
            ClusterRecord {
                cluster_id: "C".into(),
                treatment: false,
                outcomes: vec![1.0, 0.0],
            },
            ClusterRecord {
                cluster_id: "D".into(),
                treatment: false,
                outcomes: vec![1.0, 0.0, 0.0, 0.0],
            },
        ],
        OutcomeKind::Binary,
    )
    .unwrap()
}

/// PO1 fixture: cluster 1 (n=4) with arm means 0.75/0.25, cluster 2
/// (n=2) with arm means 0.5/0.5.
pub fn fixture_po1() -> PotentialOutcomeDataset {
    PotentialOutcomeDataset::new(
        vec![
            PotentialClusterRecord {
                cluster_id: "1".into(),
                y1: vec![1.0, 1.0, 1.0, 0.0],
                y0: vec![1.0, 0.0, 0.0, 0.0],
            },
            PotentialClusterRecord {
                cluster_id: "2".into(),
                y1: vec![1.0, 0.0],
                y0: vec![0.0, 1.0],
            },
        ],
        OutcomeKind::Binary,
    )
    .unwrap()
}
