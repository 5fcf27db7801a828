//! Shared estimating-equation machinery: weighted GLM fits for the
//! intercept-plus-treatment design (identity and logit links), and
//! cluster-robust sandwich covariance with the optional Fay-Graubard
//! small-sample correction.

use crate::data::{ObservedDataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::numeric::{expit, mat2_det, mat2_inv, mat2_mul, mat2_vec, outer2, KahanSum, Mat2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

/// Per-observation weights for working-independence fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsWeights {
    /// Every participant weighted 1 (participant-average).
    Unit,
    /// Every participant weighted 1/n_j so each cluster sums to 1
    /// (cluster-average).
    InverseClusterSize,
}

/// Converged working-GLM fit plus the per-cluster pieces the sandwich
/// needs: score contributions U_j and bread blocks D_j' V_j^-1 D_j.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub alpha: f64,
    pub beta: f64,
    pub link: Link,
    pub cluster_scores: Vec<[f64; 2]>,
    pub cluster_bread: Vec<Mat2>,
    pub bread: Mat2,
    pub converged: bool,
    pub iterations: usize,
    pub n_clusters: usize,
}

impl GlmFit {
    /// Fitted mean in arm z.
    pub fn fitted(&self, z: bool) -> f64 {
        let eta = self.alpha + if z { self.beta } else { 0.0 };
        match self.link {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    None,
    FayGraubard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichSpec {
    pub correction: Correction,
    /// Fay-Graubard leverage bound.
    pub b: f64,
}

impl Default for SandwichSpec {
    fn default() -> Self {
        Self {
            correction: Correction::FayGraubard,
            b: 0.75,
        }
    }
}

impl SandwichSpec {
    pub fn hc0() -> Self {
        Self {
            correction: Correction::None,
            b: 0.75,
        }
    }

    pub fn fay_graubard(b: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&b) || b == 0.0 {
            return Err(Error::DomainError {
                what: "Fay-Graubard bound b".into(),
                range: "(0, 1)".into(),
                value: b,
            });
        }
        Ok(Self {
            correction: Correction::FayGraubard,
            b,
        })
    }
}

struct ClusterStats {
    z: bool,
    /// Total observation weight in the cluster.
    w_total: f64,
    /// Weighted outcome sum.
    wy: f64,
}

fn cluster_stats(data: &ObservedDataset, weights: ObsWeights) -> Vec<ClusterStats> {
    data.clusters()
        .iter()
        .map(|c| {
            let n = c.outcomes.len() as f64;
            let w = match weights {
                ObsWeights::Unit => 1.0,
                ObsWeights::InverseClusterSize => 1.0 / n,
            };
            let mut wy = KahanSum::new();
            for &y in &c.outcomes {
                wy.add(w * y);
            }
            ClusterStats {
                z: c.treatment,
                w_total: w * n,
                wy: wy.value(),
            }
        })
        .collect()
}

fn arm_totals(stats: &[ClusterStats]) -> ([f64; 2], [f64; 2]) {
    // (weight totals, weighted outcome totals) indexed by arm.
    let mut w = [KahanSum::new(), KahanSum::new()];
    let mut wy = [KahanSum::new(), KahanSum::new()];
    for s in stats {
        let a = usize::from(s.z);
        w[a].add(s.w_total);
        wy[a].add(s.wy);
    }
    (
        [w[0].value(), w[1].value()],
        [wy[0].value(), wy[1].value()],
    )
}

/// Fit the intercept-plus-treatment working-independence GLM. Identity
/// link solves in one weighted-least-squares step; logit link runs IRLS
/// to relative tolerance 1e-10 from (0, 0).
pub fn fit_working_glm(
    data: &ObservedDataset,
    link: Link,
    weights: ObsWeights,
) -> Result<GlmFit> {
    data.require_both_arms()?;
    if link == Link::Logit && data.outcome_kind() != OutcomeKind::Binary {
        return Err(Error::BinaryRequired);
    }
    let stats = cluster_stats(data, weights);
    let (w_arm, wy_arm) = arm_totals(&stats);
    let pbar = [wy_arm[0] / w_arm[0], wy_arm[1] / w_arm[1]];

    let (alpha, beta, converged, iterations) = match link {
        Link::Identity => (pbar[0], pbar[1] - pbar[0], true, 1),
        Link::Logit => {
            for arm in 0..2 {
                if pbar[arm] <= 0.0 || pbar[arm] >= 1.0 {
                    return Err(Error::Separation {
                        arm: arm as u8,
                        value: pbar[arm],
                    });
                }
            }
            irls_logit(&w_arm, &wy_arm)?
        }
    };

    // Per-cluster scores and bread blocks at the solution.
    let mu = |z: bool| -> f64 {
        let eta = alpha + if z { beta } else { 0.0 };
        match link {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    };
    let variance = |z: bool| -> f64 {
        match link {
            Link::Identity => 1.0,
            Link::Logit => {
                let m = mu(z);
                m * (1.0 - m)
            }
        }
    };
    let mut cluster_scores = Vec::with_capacity(stats.len());
    let mut cluster_bread = Vec::with_capacity(stats.len());
    let mut bread = [[0.0f64; 2]; 2];
    for s in &stats {
        let zf = f64::from(s.z);
        let resid = s.wy - s.w_total * mu(s.z);
        cluster_scores.push([resid, zf * resid]);
        let a = s.w_total * variance(s.z);
        let block = [[a, a * zf], [a * zf, a * zf]];
        for i in 0..2 {
            for j in 0..2 {
                bread[i][j] += block[i][j];
            }
        }
        cluster_bread.push(block);
    }

    Ok(GlmFit {
        alpha,
        beta,
        link,
        cluster_scores,
        cluster_bread,
        bread,
        converged,
        iterations,
        n_clusters: stats.len(),
    })
}

/// IRLS for the two-arm logit design using binomial working variance.
/// The weighted arm means are sufficient statistics, so each Fisher
/// scoring step only needs the arm totals.
fn irls_logit(w_arm: &[f64; 2], wy_arm: &[f64; 2]) -> Result<(f64, f64, bool, usize)> {
    let mut alpha = 0.0f64;
    let mut beta = 0.0f64;
    let max_iter = 100;
    for iter in 1..=max_iter {
        let mu = [expit(alpha), expit(alpha + beta)];
        let v = [mu[0] * (1.0 - mu[0]), mu[1] * (1.0 - mu[1])];
        // Score and information for (alpha, beta).
        let s = [
            wy_arm[0] - w_arm[0] * mu[0] + wy_arm[1] - w_arm[1] * mu[1],
            wy_arm[1] - w_arm[1] * mu[1],
        ];
        let info = [
            [w_arm[0] * v[0] + w_arm[1] * v[1], w_arm[1] * v[1]],
            [w_arm[1] * v[1], w_arm[1] * v[1]],
        ];
        let inv = mat2_inv(&info).ok_or(Error::RankDeficient)?;
        let step = mat2_vec(&inv, &s);
        alpha += step[0];
        beta += step[1];
        let change = step[0].abs().max(step[1].abs());
        let scale = alpha.abs().max(beta.abs()).max(1.0);
        if change / scale < 1e-10 {
            return Ok((alpha, beta, true, iter));
        }
    }
    Err(Error::NonConvergence {
        what: "IRLS (logit link)".into(),
        iterations: max_iter,
    })
}

/// Cluster-robust sandwich variance of the treatment coefficient:
/// A^-1 (sum_j U_j U_j') A^-1, with the Fay-Graubard per-cluster
/// leverage inflation H_j = diag{(1 - min(b, q_jk))^(-1/2)} applied to
/// the scores when requested.
pub fn cluster_robust_vcov(fit: &GlmFit, spec: &SandwichSpec) -> Result<f64> {
    if !fit.converged {
        return Err(Error::NonConvergence {
            what: "working GLM".into(),
            iterations: fit.iterations,
        });
    }
    if fit.n_clusters < 3 {
        return Err(Error::InestimableVariance {
            reason: format!("{} clusters", fit.n_clusters),
        });
    }
    if mat2_det(&fit.bread).abs() < 1e-300 {
        return Err(Error::RankDeficient);
    }
    let a_inv = mat2_inv(&fit.bread).ok_or(Error::RankDeficient)?;
    let mut meat = [[0.0f64; 2]; 2];
    for (u, a_j) in fit.cluster_scores.iter().zip(&fit.cluster_bread) {
        let u_adj = match spec.correction {
            Correction::None => *u,
            Correction::FayGraubard => {
                let g = mat2_mul(a_j, &a_inv);
                let h = [
                    1.0 / (1.0 - g[0][0].clamp(0.0, spec.b)).sqrt(),
                    1.0 / (1.0 - g[1][1].clamp(0.0, spec.b)).sqrt(),
                ];
                [h[0] * u[0], h[1] * u[1]]
            }
        };
        let o = outer2(&u_adj);
        for i in 0..2 {
            for j in 0..2 {
                meat[i][j] += o[i][j];
            }
        }
    }
    let v = mat2_mul(&mat2_mul(&a_inv, &meat), &a_inv);
    Ok(v[1][1])
}
