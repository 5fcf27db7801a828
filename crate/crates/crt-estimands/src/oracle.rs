//! Finite-population estimand values computed directly from a complete
//! potential-outcome table. These are the ground truth the estimator
//! modules are checked against, so all pooled sums use compensated
//! summation.

use crate::data::{
    AveragingF, EstimandSpec, Margin, Measure, OutcomeKind, PotentialOutcomeDataset, Weighting,
};
use crate::error::{Error, Result};
use crate::numeric::KahanSum;

/// Within-cluster contrast of potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterContrast {
    pub cluster_id: String,
    pub n: usize,
    pub mean1: f64,
    pub mean0: f64,
    /// mean1 - mean0.
    pub beta: f64,
    /// Cluster odds ratio; absent when either arm mean hits 0 or 1.
    pub odds_ratio: Option<f64>,
}

fn odds(p: f64) -> f64 {
    p / (1.0 - p)
}

/// One contrast per cluster, in dataset order.
pub fn cluster_contrasts(po: &PotentialOutcomeDataset) -> Vec<ClusterContrast> {
    po.clusters()
        .iter()
        .map(|c| {
            let n = c.y1.len();
            let m1 = kahan_mean(&c.y1);
            let m0 = kahan_mean(&c.y0);
            let odds_ratio = if po.outcome_kind() == OutcomeKind::Binary
                && m1 > 0.0
                && m1 < 1.0
                && m0 > 0.0
                && m0 < 1.0
            {
                Some(odds(m1) / odds(m0))
            } else {
                None
            };
            ClusterContrast {
                cluster_id: c.cluster_id.clone(),
                n,
                mean1: m1,
                mean0: m0,
                beta: m1 - m0,
                odds_ratio,
            }
        })
        .collect()
}

fn kahan_mean(values: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value() / values.len() as f64
}

/// Arm-level average potential outcomes: pooled over participants for
/// the participant-average weighting, equally over clusters otherwise.
fn arm_means(po: &PotentialOutcomeDataset, weighting: Weighting) -> (f64, f64) {
    match weighting {
        Weighting::ParticipantAverage => {
            let mut s1 = KahanSum::new();
            let mut s0 = KahanSum::new();
            let mut n = 0usize;
            for c in po.clusters() {
                for &v in &c.y1 {
                    s1.add(v);
                }
                for &v in &c.y0 {
                    s0.add(v);
                }
                n += c.y1.len();
            }
            (s1.value() / n as f64, s0.value() / n as f64)
        }
        Weighting::ClusterAverage => {
            let mut s1 = KahanSum::new();
            let mut s0 = KahanSum::new();
            for c in po.clusters() {
                s1.add(kahan_mean(&c.y1));
                s0.add(kahan_mean(&c.y0));
            }
            let m = po.n_clusters() as f64;
            (s1.value() / m, s0.value() / m)
        }
    }
}

/// Marginal estimand: summarise each potential-outcome arm first, then
/// contrast (through the odds transform for odds ratios).
pub fn marginal_estimand(
    po: &PotentialOutcomeDataset,
    weighting: Weighting,
    measure: Measure,
) -> Result<f64> {
    let (p1, p0) = arm_means(po, weighting);
    match measure {
        Measure::Difference => Ok(p1 - p0),
        Measure::OddsRatio => {
            if po.outcome_kind() != OutcomeKind::Binary {
                return Err(Error::BinaryRequired);
            }
            for (arm, p) in [(1u8, p1), (0u8, p0)] {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::DegenerateEstimand { arm, value: p });
                }
            }
            Ok(odds(p1) / odds(p0))
        }
    }
}

/// Cluster-specific estimand: contrast within each cluster, then take a
/// weighted average of the contrasts (of `f` of the odds ratios).
pub fn cluster_specific_estimand(
    po: &PotentialOutcomeDataset,
    weighting: Weighting,
    measure: Measure,
    f: AveragingF,
) -> Result<f64> {
    let contrasts = cluster_contrasts(po);
    let weight = |c: &ClusterContrast| match weighting {
        Weighting::ParticipantAverage => c.n as f64,
        Weighting::ClusterAverage => 1.0,
    };
    match measure {
        Measure::Difference => {
            let mut num = KahanSum::new();
            let mut den = KahanSum::new();
            for c in &contrasts {
                num.add(weight(c) * c.beta);
                den.add(weight(c));
            }
            Ok(num.value() / den.value())
        }
        Measure::OddsRatio => {
            if po.outcome_kind() != OutcomeKind::Binary {
                return Err(Error::BinaryRequired);
            }
            let undefined: Vec<String> = contrasts
                .iter()
                .filter(|c| c.odds_ratio.is_none())
                .map(|c| c.cluster_id.clone())
                .collect();
            if !undefined.is_empty() {
                return Err(Error::BoundednessViolation {
                    clusters: undefined,
                });
            }
            let mut num = KahanSum::new();
            let mut den = KahanSum::new();
            for c in &contrasts {
                let or = c.odds_ratio.unwrap();
                let v = match f {
                    AveragingF::Log => or.ln(),
                    AveragingF::Identity => or,
                };
                num.add(weight(c) * v);
                den.add(weight(c));
            }
            let avg = num.value() / den.value();
            Ok(match f {
                AveragingF::Log => avg.exp(),
                // Identity averaging needs no back-transform.
                AveragingF::Identity => avg,
            })
        }
    }
}

/// Precision-weighted difference with cluster weights n/(1+(n-1)rho);
/// the quantity a random-intercept linear mixed model targets.
pub fn precision_weighted_estimand(po: &PotentialOutcomeDataset, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(Error::DomainError {
            what: "rho".into(),
            range: "[0, 1]".into(),
            value: rho,
        });
    }
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for c in cluster_contrasts(po) {
        let n = c.n as f64;
        let w = n / (1.0 + (n - 1.0) * rho);
        num.add(w * c.beta);
        den.add(w);
    }
    Ok(num.value() / den.value())
}

/// Dispatch on a full estimand specification.
pub fn estimand_value(po: &PotentialOutcomeDataset, spec: &EstimandSpec) -> Result<f64> {
    match spec.margin {
        Margin::Marginal => marginal_estimand(po, spec.weighting, spec.measure),
        Margin::ClusterSpecific => {
            cluster_specific_estimand(po, spec.weighting, spec.measure, spec.averaging_f)
        }
    }
}
