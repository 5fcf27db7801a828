//! Cluster-level-summary estimators. Each estimator reduces to a closed
//! form on per-cluster summaries: a (weighted) contrast of arm aggregates
//! for the marginal versions, and a (weighted) contrast of per-cluster
//! link-scale summaries for the cluster-specific versions. Standard
//! errors are Huber-White cluster-level sandwiches.

use std::collections::BTreeMap;

use crate::data::{
    summarize_clusters, ClusterSummary, EstimateResult, Measure, ObservedDataset, OutcomeKind,
    VarianceMethod, Weighting,
};
use crate::error::{Error, Result};
use crate::numeric::{logit, KahanSum};

/// How to treat clusters whose observed proportion sits at 0 or 1 when a
/// log-odds transform is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    /// Fail, naming the offending clusters.
    #[default]
    Error,
    /// Add 0.5 events and 0.5 non-events to the boundary cluster's counts.
    ContinuityCorrection,
}

/// Weighted two-group regression underlying a summary estimator, kept in
/// the form needed by the sandwich variance: per-cluster weights and
/// residuals on the regression response scale, plus per-arm delta-method
/// factors mapping response-scale variance to the link scale.
#[derive(Debug, Clone)]
pub struct SummaryRegressionFit {
    /// Link-scale treatment coefficient.
    pub beta_hat: f64,
    /// Link-scale intercept.
    pub alpha_hat: f64,
    /// Arm aggregates on the response scale (treated, control).
    pub arm_aggregates: (f64, f64),
    pub weights_used: Weighting,
    /// Per-cluster residuals on the response scale, dataset order.
    pub residuals: Vec<f64>,
    pub treatments: Vec<bool>,
    pub weights: Vec<f64>,
    /// d(link)/d(response) at each arm aggregate (1 when the response is
    /// already on the link scale).
    pub delta: (f64, f64),
}

fn weight_of(weighting: Weighting, n: usize) -> f64 {
    match weighting {
        Weighting::ParticipantAverage => n as f64,
        Weighting::ClusterAverage => 1.0,
    }
}

fn weighted_arm_mean(
    summaries: &[(f64, f64, bool)], // (response, weight, treatment)
    arm: bool,
) -> Result<f64> {
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for &(resp, w, z) in summaries {
        if z == arm {
            num.add(w * resp);
            den.add(w);
        }
    }
    if den.value() == 0.0 {
        return Err(Error::EmptyArm {
            arm: u8::from(arm),
        });
    }
    Ok(num.value() / den.value())
}

fn build_fit(
    rows: &[(f64, f64, bool)],
    weighting: Weighting,
    alpha: f64,
    beta: f64,
    aggregates: (f64, f64),
    delta: (f64, f64),
) -> SummaryRegressionFit {
    let (p1, p0) = aggregates;
    SummaryRegressionFit {
        beta_hat: beta,
        alpha_hat: alpha,
        arm_aggregates: aggregates,
        weights_used: weighting,
        residuals: rows
            .iter()
            .map(|&(resp, _, z)| resp - if z { p1 } else { p0 })
            .collect(),
        treatments: rows.iter().map(|r| r.2).collect(),
        weights: rows.iter().map(|r| r.1).collect(),
        delta,
    }
}

/// HC0 cluster-level sandwich variance of the link-scale treatment
/// coefficient: per-arm sum of squared weighted residuals over the
/// squared arm weight total, mapped through the delta factors.
pub fn huber_white_vcov(fit: &SummaryRegressionFit) -> Result<f64> {
    let mut var = 0.0;
    for arm in [true, false] {
        let count = fit.treatments.iter().filter(|&&z| z == arm).count();
        if count < 2 {
            return Err(Error::InestimableVariance {
                reason: format!("arm {} has {count} cluster(s)", u8::from(arm)),
            });
        }
        let mut meat = KahanSum::new();
        let mut wsum = KahanSum::new();
        for i in 0..fit.weights.len() {
            if fit.treatments[i] == arm {
                let we = fit.weights[i] * fit.residuals[i];
                meat.add(we * we);
                wsum.add(fit.weights[i]);
            }
        }
        let d = if arm { fit.delta.0 } else { fit.delta.1 };
        var += d * d * meat.value() / (wsum.value() * wsum.value());
    }
    Ok(var)
}

fn result_from_fit(
    fit: &SummaryRegressionFit,
    measure: Measure,
    m_clusters: usize,
    extra: BTreeMap<String, f64>,
) -> Result<EstimateResult> {
    let var = huber_white_vcov(fit)?;
    let df = (m_clusters as f64 - 2.0).max(1.0);
    EstimateResult::from_link(
        fit.beta_hat,
        var,
        Some(df),
        measure,
        VarianceMethod::Hc0,
        extra,
    )
}

/// Marginal summary estimator: aggregate cluster means within each arm
/// (cluster-size weighted for the participant-average version), then
/// contrast the aggregates, through the odds transform for odds ratios.
pub fn marginal_summary_estimate(
    data: &ObservedDataset,
    weighting: Weighting,
    measure: Measure,
) -> Result<EstimateResult> {
    let (result, _) = marginal_summary_fit(data, weighting, measure)?;
    Ok(result)
}

/// As `marginal_summary_estimate`, also returning the underlying fit.
pub fn marginal_summary_fit(
    data: &ObservedDataset,
    weighting: Weighting,
    measure: Measure,
) -> Result<(EstimateResult, SummaryRegressionFit)> {
    data.require_both_arms()?;
    if measure == Measure::OddsRatio && data.outcome_kind() != OutcomeKind::Binary {
        return Err(Error::BinaryRequired);
    }
    let summaries = summarize_clusters(data);
    let rows: Vec<(f64, f64, bool)> = summaries
        .iter()
        .map(|c| (c.mean, weight_of(weighting, c.n), c.treatment))
        .collect();
    let p1 = weighted_arm_mean(&rows, true)?;
    let p0 = weighted_arm_mean(&rows, false)?;

    let (alpha, beta, delta) = match measure {
        Measure::Difference => (p0, p1 - p0, (1.0, 1.0)),
        Measure::OddsRatio => {
            for (arm, p) in [(1u8, p1), (0u8, p0)] {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::DegenerateArm { arm, value: p });
                }
            }
            // d logit(p)/dp = 1/(p(1-p)) maps the response-scale
            // sandwich onto the link scale.
            (
                logit(p0),
                logit(p1) - logit(p0),
                (1.0 / (p1 * (1.0 - p1)), 1.0 / (p0 * (1.0 - p0))),
            )
        }
    };
    let fit = build_fit(&rows, weighting, alpha, beta, (p1, p0), delta);
    let result = result_from_fit(&fit, measure, summaries.len(), BTreeMap::new())?;
    Ok((result, fit))
}

fn link_response(
    c: &ClusterSummary,
    policy: BoundaryPolicy,
) -> std::result::Result<(f64, bool), ()> {
    if let Some(lo) = c.log_odds {
        return Ok((lo, false));
    }
    match policy {
        BoundaryPolicy::Error => Err(()),
        BoundaryPolicy::ContinuityCorrection => {
            let events = c.mean * c.n as f64;
            let corrected = (events + 0.5) / ((c.n as f64 - events) + 0.5);
            Ok((corrected.ln(), true))
        }
    }
}

/// Cluster-specific summary estimator: transform each cluster mean to
/// the link scale, then contrast the (weighted) arm means of those
/// summaries. For differences this coincides with the marginal version.
pub fn cluster_specific_summary_estimate(
    data: &ObservedDataset,
    weighting: Weighting,
    measure: Measure,
    boundary_policy: BoundaryPolicy,
) -> Result<EstimateResult> {
    let (result, _) = cluster_specific_summary_fit(data, weighting, measure, boundary_policy)?;
    Ok(result)
}

/// As `cluster_specific_summary_estimate`, also returning the fit.
pub fn cluster_specific_summary_fit(
    data: &ObservedDataset,
    weighting: Weighting,
    measure: Measure,
    boundary_policy: BoundaryPolicy,
) -> Result<(EstimateResult, SummaryRegressionFit)> {
    data.require_both_arms()?;
    let summaries = summarize_clusters(data);
    let mut corrected = 0usize;
    let rows: Vec<(f64, f64, bool)> = match measure {
        Measure::Difference => summaries
            .iter()
            .map(|c| (c.mean, weight_of(weighting, c.n), c.treatment))
            .collect(),
        Measure::OddsRatio => {
            if data.outcome_kind() != OutcomeKind::Binary {
                return Err(Error::BinaryRequired);
            }
            let mut rows = Vec::with_capacity(summaries.len());
            let mut boundary = Vec::new();
            for c in &summaries {
                match link_response(c, boundary_policy) {
                    Ok((resp, was_corrected)) => {
                        corrected += usize::from(was_corrected);
                        rows.push((resp, weight_of(weighting, c.n), c.treatment));
                    }
                    Err(()) => boundary.push(c.cluster_id.clone()),
                }
            }
            if !boundary.is_empty() {
                return Err(Error::BoundednessViolation { clusters: boundary });
            }
            rows
        }
    };
    let a1 = weighted_arm_mean(&rows, true)?;
    let a0 = weighted_arm_mean(&rows, false)?;
    let fit = build_fit(&rows, weighting, a0, a1 - a0, (a1, a0), (1.0, 1.0));
    let mut extra = BTreeMap::new();
    if corrected > 0 {
        extra.insert("continuity_corrected_clusters".into(), corrected as f64);
    }
    let result = result_from_fit(&fit, measure, summaries.len(), extra)?;
    Ok((result, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fixture_ex1, ClusterRecord};

    const TOL: f64 = 1e-12;

    #[test]
    fn ex1_marginal_closed_forms() {
        let data = fixture_ex1();
        let pa =
            marginal_summary_estimate(&data, Weighting::ParticipantAverage, Measure::OddsRatio)
                .unwrap();
        assert!((pa.estimate - 4.0).abs() < 1e-10);
        assert!((pa.link_scale_estimate - 4f64.ln()).abs() < 1e-10);

        let ca = marginal_summary_estimate(&data, Weighting::ClusterAverage, Measure::OddsRatio)
            .unwrap();
        assert!((ca.estimate - 25.0 / 9.0).abs() < 1e-10);

        let diff =
            marginal_summary_estimate(&data, Weighting::ParticipantAverage, Measure::Difference)
                .unwrap();
        assert!((diff.estimate - 1.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn ex1_cluster_specific_closed_forms() {
        let data = fixture_ex1();
        let pa = cluster_specific_summary_estimate(
            &data,
            Weighting::ParticipantAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap();
        assert!((pa.estimate - 3f64.powf(4.0 / 3.0)).abs() < 1e-10);

        let ca = cluster_specific_summary_estimate(
            &data,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap();
        assert!((ca.estimate - 3.0).abs() < 1e-10);
        assert!((ca.se_link - 3f64.ln() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn ex1_unweighted_hc0_variance() {
        let data = fixture_ex1();
        let (_, fit) = cluster_specific_summary_fit(
            &data,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap();
        let v = huber_white_vcov(&fit).unwrap();
        assert!((v - (3f64.ln() / 2.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn null_dataset_gives_unit_or() {
        let data = ObservedDataset::new(
            vec![
                ClusterRecord {
                    cluster_id: "t1".into(),
                    treatment: true,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "t2".into(),
                    treatment: true,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c1".into(),
                    treatment: false,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c2".into(),
                    treatment: false,
                    outcomes: vec![1.0, 0.0],
                },
            ],
            OutcomeKind::Binary,
        )
        .unwrap();
        let r = marginal_summary_estimate(&data, Weighting::ParticipantAverage, Measure::OddsRatio)
            .unwrap();
        assert!((r.estimate - 1.0).abs() < TOL);
        assert!(r.link_scale_estimate.abs() < TOL);
        // residuals are all zero -> variance 0
        let (_, fit) =
            marginal_summary_fit(&data, Weighting::ParticipantAverage, Measure::OddsRatio)
                .unwrap();
        assert_eq!(huber_white_vcov(&fit).unwrap(), 0.0);
    }

    #[test]
    fn boundary_policy_error_names_clusters() {
        let data = ObservedDataset::new(
            vec![
                ClusterRecord {
                    cluster_id: "full".into(),
                    treatment: true,
                    outcomes: vec![1.0, 1.0],
                },
                ClusterRecord {
                    cluster_id: "t".into(),
                    treatment: true,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c".into(),
                    treatment: false,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c2".into(),
                    treatment: false,
                    outcomes: vec![0.0, 1.0],
                },
            ],
            OutcomeKind::Binary,
        )
        .unwrap();
        let err = cluster_specific_summary_estimate(
            &data,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap_err();
        assert!(err.to_string().contains("full"));

        let ok = cluster_specific_summary_estimate(
            &data,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::ContinuityCorrection,
        )
        .unwrap();
        assert_eq!(
            ok.diagnostics.get("continuity_corrected_clusters"),
            Some(&1.0)
        );
        // corrected proportion: (2 + 0.5)/(0 + 0.5) = 5 on the odds scale
        let expected = ((2.5f64 / 0.5).ln() + 0.0) / 2.0 - 0.0;
        assert!((ok.link_scale_estimate - expected).abs() < TOL);
    }

    #[test]
    fn single_cluster_arm_variance_is_inestimable() {
        let data = ObservedDataset::new(
            vec![
                ClusterRecord {
                    cluster_id: "t".into(),
                    treatment: true,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c1".into(),
                    treatment: false,
                    outcomes: vec![1.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c2".into(),
                    treatment: false,
                    outcomes: vec![0.0, 1.0],
                },
            ],
            OutcomeKind::Binary,
        )
        .unwrap();
        let err =
            marginal_summary_estimate(&data, Weighting::ParticipantAverage, Measure::OddsRatio)
                .unwrap_err();
        assert!(matches!(err, Error::InestimableVariance { .. }));
    }

    #[test]
    fn duplicating_clusters_divides_hc0_variance() {
        let data = fixture_ex1();
        let (_, fit) = cluster_specific_summary_fit(
            &data,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap();
        let v1 = huber_white_vcov(&fit).unwrap();

        let k = 3;
        let mut clusters = Vec::new();
        for rep in 0..k {
            for c in data.clusters() {
                clusters.push(ClusterRecord {
                    cluster_id: format!("{}-{rep}", c.cluster_id),
                    treatment: c.treatment,
                    outcomes: c.outcomes.clone(),
                });
            }
        }
        let dup = ObservedDataset::new(clusters, OutcomeKind::Binary).unwrap();
        let (_, fit_k) = cluster_specific_summary_fit(
            &dup,
            Weighting::ClusterAverage,
            Measure::OddsRatio,
            BoundaryPolicy::Error,
        )
        .unwrap();
        let vk = huber_white_vcov(&fit_k).unwrap();
        assert!((vk - v1 / k as f64).abs() < 1e-14);
    }

    #[test]
    fn difference_measure_marginal_equals_cluster_specific() {
        let data = fixture_ex1();
        for w in [Weighting::ParticipantAverage, Weighting::ClusterAverage] {
            let m = marginal_summary_estimate(&data, w, Measure::Difference).unwrap();
            let cs = cluster_specific_summary_estimate(
                &data,
                w,
                Measure::Difference,
                BoundaryPolicy::Error,
            )
            .unwrap();
            assert!((m.estimate - cs.estimate).abs() < TOL);
            assert!((m.se_link - cs.se_link).abs() < TOL);
        }
    }
}
