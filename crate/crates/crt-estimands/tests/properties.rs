//! Property tests for the estimand oracle and estimators, plus the
//! mixed-model invariants that need simulated data.

mod common;

use proptest::prelude::*;

use crt_estimands::mixed::{glmm_loglik, glmm_score};
use crt_estimands::{
    cluster_specific_estimand, cluster_specific_summary_estimate, generate, implied_lmm_target,
    lmm_fit, marginal_estimand, marginal_summary_estimate, AveragingF, BoundaryPolicy,
    ClusterRecord, DgpConfig, Measure, ObservedDataset, OutcomeKind, PotentialClusterRecord,
    PotentialOutcomeDataset, SizeStratum, VarianceComponents, Weighting,
};

fn potential_table() -> impl Strategy<Value = PotentialOutcomeDataset> {
    prop::collection::vec(
        (
            prop::collection::vec(0u8..2, 1..25),
            prop::collection::vec(0u8..2, 1..25),
        ),
        2..12,
    )
    .prop_map(|clusters| {
        let records = clusters
            .into_iter()
            .enumerate()
            .map(|(j, (y1, y0))| {
                // Arms must be the same length within a cluster.
                let n = y1.len().min(y0.len());
                PotentialClusterRecord {
                    cluster_id: format!("c{j}"),
                    y1: y1[..n].iter().map(|&v| f64::from(v)).collect(),
                    y0: y0[..n].iter().map(|&v| f64::from(v)).collect(),
                }
            })
            .collect();
        PotentialOutcomeDataset::new(records, OutcomeKind::Binary).unwrap()
    })
}

proptest! {
    #[test]
    fn estimands_invariant_under_cluster_order(po in potential_table(), seed in 0u64..1000) {
        use rand::prelude::*;
        let mut clusters = po.clusters().to_vec();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        clusters.shuffle(&mut rng);
        let shuffled = PotentialOutcomeDataset::new(clusters, OutcomeKind::Binary).unwrap();
        for weighting in [Weighting::ParticipantAverage, Weighting::ClusterAverage] {
            let a = marginal_estimand(&po, weighting, Measure::Difference).unwrap();
            let b = marginal_estimand(&shuffled, weighting, Measure::Difference).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = cluster_specific_estimand(&po, weighting, Measure::Difference, AveragingF::Identity).unwrap();
            let b = cluster_specific_estimand(&shuffled, weighting, Measure::Difference, AveragingF::Identity).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn difference_estimands_collapse(po in potential_table()) {
        for weighting in [Weighting::ParticipantAverage, Weighting::ClusterAverage] {
            let marginal = marginal_estimand(&po, weighting, Measure::Difference).unwrap();
            let cluster = cluster_specific_estimand(&po, weighting, Measure::Difference, AveragingF::Identity).unwrap();
            prop_assert!((marginal - cluster).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_clusters_keeps_point_estimates(seed in 0u64..200) {
        let mut rng = common::rng(seed);
        let data = common::random_observed_binary(&mut rng);
        let mut doubled: Vec<ClusterRecord> = Vec::new();
        for c in data.clusters() {
            for copy in 0..2 {
                let mut c2 = c.clone();
                c2.cluster_id = format!("{}_{copy}", c.cluster_id);
                doubled.push(c2);
            }
        }
        let doubled = ObservedDataset::new(doubled, OutcomeKind::Binary).unwrap();
        for weighting in [Weighting::ParticipantAverage, Weighting::ClusterAverage] {
            let a = marginal_summary_estimate(&data, weighting, Measure::OddsRatio).unwrap();
            let b = marginal_summary_estimate(&doubled, weighting, Measure::OddsRatio).unwrap();
            prop_assert!((a.link_scale_estimate - b.link_scale_estimate).abs() < 1e-10);
            // HC0 variance of a duplicated sample halves.
            let (va, vb) = (a.se_link * a.se_link, b.se_link * b.se_link);
            prop_assert!((vb - va / 2.0).abs() < 1e-10);
            let a = cluster_specific_summary_estimate(&data, weighting, Measure::OddsRatio, BoundaryPolicy::ContinuityCorrection).unwrap();
            let b = cluster_specific_summary_estimate(&doubled, weighting, Measure::OddsRatio, BoundaryPolicy::ContinuityCorrection).unwrap();
            prop_assert!((a.link_scale_estimate - b.link_scale_estimate).abs() < 1e-10);
        }
    }
}

fn informative_continuous_config(m: usize) -> DgpConfig {
    DgpConfig {
        n_clusters: m,
        strata: vec![
            SizeStratum {
                size: 5,
                probability: 0.5,
                effect: 1.0,
                control_level: None,
            },
            SizeStratum {
                size: 100,
                probability: 0.5,
                effect: 0.0,
                control_level: None,
            },
        ],
        outcome_kind: OutcomeKind::Continuous,
        control_level: 0.0,
        random_intercept_sd: 0.5,
        residual_sd: 1.0,
        seed: 4242,
    }
}

/// Under informative cluster size the LMM tracks the precision-weighted
/// difference at its own estimated icc, not the participant-average
/// estimand.
#[test]
fn lmm_tracks_precision_weighted_target() {
    let config = informative_continuous_config(3000);
    let (po, obs) = generate(&config, 0).unwrap();
    let fit = lmm_fit(&obs).unwrap();
    let vc = VarianceComponents {
        sigma_b_sq: fit.diagnostics["sigma_b_sq"],
        sigma_w_sq: fit.diagnostics["sigma_w_sq"],
    };
    let implied = implied_lmm_target(&po, &vc).unwrap();
    let mg_pa = marginal_estimand(&po, Weighting::ParticipantAverage, Measure::Difference).unwrap();
    let to_implied = (fit.estimate - implied).abs();
    let to_pa = (fit.estimate - mg_pa).abs();
    assert!(to_implied < 0.05, "LMM {} vs implied {implied}", fit.estimate);
    assert!(
        to_pa > 5.0 * to_implied.max(0.02),
        "LMM {} unexpectedly near the PA estimand {mg_pa}",
        fit.estimate
    );
}

/// The analytic quadrature score matches central finite differences of
/// the marginal log-likelihood away from the optimum.
#[test]
fn glmm_score_matches_finite_differences() {
    let config = DgpConfig {
        n_clusters: 24,
        strata: vec![
            SizeStratum {
                size: 8,
                probability: 0.5,
                effect: 0.6,
                control_level: None,
            },
            SizeStratum {
                size: 60,
                probability: 0.5,
                effect: 0.6,
                control_level: None,
            },
        ],
        outcome_kind: OutcomeKind::Binary,
        control_level: -1.2,
        random_intercept_sd: 0.5,
        residual_sd: 1.0,
        seed: 99,
    };
    let (_, obs) = generate(&config, 0).unwrap();
    let (alpha, beta, sigma) = (-1.0, 0.4, 0.5);
    let score = glmm_score(&obs, alpha, beta, sigma, 25);
    let step = 1e-5;
    let fd = [
        (glmm_loglik(&obs, alpha + step, beta, sigma, 25)
            - glmm_loglik(&obs, alpha - step, beta, sigma, 25))
            / (2.0 * step),
        (glmm_loglik(&obs, alpha, beta + step, sigma, 25)
            - glmm_loglik(&obs, alpha, beta - step, sigma, 25))
            / (2.0 * step),
        // The sigma component is parameterized as d/d(log sigma).
        (glmm_loglik(&obs, alpha, beta, (sigma.ln() + step).exp(), 25)
            - glmm_loglik(&obs, alpha, beta, (sigma.ln() - step).exp(), 25))
            / (2.0 * step),
    ];
    for (k, (&s, &f)) in score.iter().zip(&fd).enumerate() {
        let rel = (s - f).abs() / f.abs().max(1.0);
        assert!(rel < 1e-4, "component {k}: analytic {s} vs FD {f}");
    }
}
