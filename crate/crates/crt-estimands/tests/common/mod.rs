#![allow(dead_code)]

//! Shared helpers for the integration suites: deterministic random
//! dataset generators and an independent IRLS oracle for cluster-level
//! summary regressions.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crt_estimands::{
    ClusterRecord, ObservedDataset, OutcomeKind, PotentialClusterRecord, PotentialOutcomeDataset,
};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Random binary potential-outcome table with M in [2, 50] clusters and
/// sizes in [1, 200].
pub fn random_potential(rng: &mut ChaCha12Rng) -> PotentialOutcomeDataset {
    let m = rng.random_range(2..=50);
    let clusters = (0..m)
        .map(|j| {
            let n = rng.random_range(1..=200);
            let p1: f64 = rng.random();
            let p0: f64 = rng.random();
            PotentialClusterRecord {
                cluster_id: format!("c{j}"),
                y1: (0..n).map(|_| f64::from(rng.random::<f64>() < p1)).collect(),
                y0: (0..n).map(|_| f64::from(rng.random::<f64>() < p0)).collect(),
            }
        })
        .collect();
    PotentialOutcomeDataset::new(clusters, OutcomeKind::Binary).unwrap()
}

/// Random binary observed dataset with at least two clusters per arm
/// and both outcome values present in each arm, so logistic fits and
/// arm aggregates stay non-degenerate.
pub fn random_observed_binary(rng: &mut ChaCha12Rng) -> ObservedDataset {
    loop {
        let per_arm = rng.random_range(2..=12);
        let mut clusters = Vec::new();
        for arm in [false, true] {
            for j in 0..per_arm {
                let n = rng.random_range(1..=60);
                let p: f64 = 0.1 + 0.8 * rng.random::<f64>();
                clusters.push(ClusterRecord {
                    cluster_id: format!("{}{}", if arm { "t" } else { "c" }, j),
                    treatment: arm,
                    outcomes: (0..n).map(|_| f64::from(rng.random::<f64>() < p)).collect(),
                });
            }
        }
        let ok = [false, true].iter().all(|&arm| {
            let ys: Vec<f64> = clusters
                .iter()
                .filter(|c| c.treatment == arm)
                .flat_map(|c| c.outcomes.iter().copied())
                .collect();
            ys.iter().any(|&y| y == 0.0) && ys.iter().any(|&y| y == 1.0)
        });
        if ok {
            return ObservedDataset::new(clusters, OutcomeKind::Binary).unwrap();
        }
    }
}

/// Independent IRLS oracle: weighted logistic GLM on cluster summaries
/// logit(p_j) = alpha + beta z_j with prior weight n_j and the family
/// variance chosen by `gaussian` (true: v = 1, false: v = mu(1-mu)).
/// The solution must not depend on the family.
pub fn irls_cluster_summary(rows: &[(f64, f64, bool)], gaussian: bool) -> (f64, f64) {
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (mut alpha, mut beta) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let mut score = [0.0f64; 2];
        let mut info = [[0.0f64; 2]; 2];
        for &(p_hat, n, z) in rows {
            let zf = f64::from(z);
            let mu = expit(alpha + beta * zf);
            let dmu = mu * (1.0 - mu);
            let v = if gaussian { 1.0 } else { dmu };
            let common = n * dmu / v;
            let r = p_hat - mu;
            score[0] += common * r;
            score[1] += common * r * zf;
            let i = common * dmu;
            info[0][0] += i;
            info[0][1] += i * zf;
            info[1][0] += i * zf;
            info[1][1] += i * zf * zf;
        }
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        let da = (info[1][1] * score[0] - info[0][1] * score[1]) / det;
        let db = (info[0][0] * score[1] - info[1][0] * score[0]) / det;
        alpha += da;
        beta += db;
        if da.abs().max(db.abs()) < 1e-13 {
            break;
        }
    }
    (alpha, beta)
}
