//! GEE with an exchangeable working correlation. For the
//! intercept-plus-treatment design the mean estimating equations solve
//! in closed form given the working correlation: each cluster mean gets
//! weight n/(1+(n-1)rho), so fitting alternates that closed form with
//! moment updates of rho and the dispersion.

use std::collections::BTreeMap;

use crate::data::{EstimateResult, Measure, ObservedDataset, OutcomeKind, VarianceMethod};
use crate::engine::{cluster_robust_vcov, Correction, GlmFit, Link, SandwichSpec};
use crate::error::{Error, Result};
use crate::numeric::{logit, KahanSum};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoMode {
    /// Moment-estimate the working correlation.
    Estimate,
    /// Hold the working correlation fixed.
    Fixed(f64),
}

/// Converged GEE fit: coefficients plus working-correlation and
/// dispersion estimates.
#[derive(Debug, Clone)]
pub struct GeeFit {
    pub glm: GlmFit,
    pub rho_hat: f64,
    pub phi_hat: f64,
    pub clamped: bool,
}

struct ClusterMoments {
    z: bool,
    n: f64,
    sum_y: f64,
    sum_y2: f64,
}

pub fn gee_fit(
    data: &ObservedDataset,
    link: Link,
    rho_mode: RhoMode,
) -> Result<EstimateResult> {
    gee_fit_with(data, link, rho_mode, &SandwichSpec::default())
}

pub fn gee_fit_with(
    data: &ObservedDataset,
    link: Link,
    rho_mode: RhoMode,
    sandwich: &SandwichSpec,
) -> Result<EstimateResult> {
    let fit = gee_fit_raw(data, link, rho_mode)?;
    let var = cluster_robust_vcov(&fit.glm, sandwich)?;
    let df = (fit.glm.n_clusters as f64 - 2.0).max(1.0);
    let measure = match link {
        Link::Identity => Measure::Difference,
        Link::Logit => Measure::OddsRatio,
    };
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("rho_hat".into(), fit.rho_hat);
    diagnostics.insert("phi_hat".into(), fit.phi_hat);
    diagnostics.insert("iterations".into(), fit.glm.iterations as f64);
    diagnostics.insert("converged".into(), f64::from(fit.glm.converged));
    diagnostics.insert("rho_clamped".into(), f64::from(fit.clamped));
    let method = match sandwich.correction {
        Correction::None => VarianceMethod::Hc0,
        Correction::FayGraubard => VarianceMethod::FayGraubard { b: sandwich.b },
    };
    EstimateResult::from_link(fit.glm.beta, var, Some(df), measure, method, diagnostics)
}

/// The raw alternating fit, exposed for diagnostics and tests.
pub fn gee_fit_raw(data: &ObservedDataset, link: Link, rho_mode: RhoMode) -> Result<GeeFit> {
    data.require_both_arms()?;
    if link == Link::Logit && data.outcome_kind() != OutcomeKind::Binary {
        return Err(Error::BinaryRequired);
    }
    let moments: Vec<ClusterMoments> = data
        .clusters()
        .iter()
        .map(|c| {
            let mut s = KahanSum::new();
            let mut s2 = KahanSum::new();
            for &y in &c.outcomes {
                s.add(y);
                s2.add(y * y);
            }
            ClusterMoments {
                z: c.treatment,
                n: c.outcomes.len() as f64,
                sum_y: s.value(),
                sum_y2: s2.value(),
            }
        })
        .collect();
    let max_n = moments.iter().map(|m| m.n).fold(1.0, f64::max);
    let rho_lo = if max_n > 1.0 {
        -1.0 / (max_n - 1.0) + 1e-6
    } else {
        0.0
    };
    let rho_hi = 1.0 - 1e-6;
    let n_total: f64 = moments.iter().map(|m| m.n).sum();
    let pair_total: f64 = moments.iter().map(|m| m.n * (m.n - 1.0) / 2.0).sum();

    let mut clamped = false;
    let mut rho = match rho_mode {
        RhoMode::Estimate => 0.0,
        RhoMode::Fixed(r) => {
            if r < rho_lo || r > rho_hi {
                clamped = true;
            }
            r.clamp(rho_lo, rho_hi)
        }
    };

    // Weighted arm means of cluster means given rho; the closed-form
    // solution of the exchangeable mean equations for this design.
    let solve_mean = |rho: f64| -> Result<[f64; 2]> {
        let mut num = [KahanSum::new(), KahanSum::new()];
        let mut den = [KahanSum::new(), KahanSum::new()];
        for m in &moments {
            let w = m.n / (1.0 + (m.n - 1.0) * rho);
            let arm = usize::from(m.z);
            num[arm].add(w * m.sum_y / m.n);
            den[arm].add(w);
        }
        let mu = [num[0].value() / den[0].value(), num[1].value() / den[1].value()];
        if link == Link::Logit {
            for (arm, m) in mu.iter().enumerate() {
                if *m <= 0.0 || *m >= 1.0 {
                    return Err(Error::Separation {
                        arm: arm as u8,
                        value: *m,
                    });
                }
            }
        }
        Ok(mu)
    };

    let variance = |mu: f64| -> f64 {
        match link {
            Link::Identity => 1.0,
            Link::Logit => mu * (1.0 - mu),
        }
    };

    let mut mu = solve_mean(rho)?;
    let max_iter = 200;
    let mut iterations = 0;
    let mut converged = false;
    let mut phi = 1.0;
    for iter in 1..=max_iter {
        iterations = iter;
        // Pearson residual moments per cluster from sufficient statistics.
        let mut sum_e2 = KahanSum::new();
        let mut sum_pairs = KahanSum::new();
        for m in &moments {
            let mu_z = mu[usize::from(m.z)];
            let v = variance(mu_z);
            let rss = m.sum_y2 - 2.0 * mu_z * m.sum_y + m.n * mu_z * mu_z;
            let e2 = rss / v;
            let se = (m.sum_y - m.n * mu_z) / v.sqrt();
            sum_e2.add(e2);
            sum_pairs.add((se * se - e2) / 2.0);
        }
        phi = sum_e2.value() / (n_total - 2.0);
        let rho_new = match rho_mode {
            RhoMode::Fixed(_) => rho,
            RhoMode::Estimate => {
                let denom = phi * (pair_total - 2.0);
                if denom <= 0.0 {
                    0.0
                } else {
                    let r = sum_pairs.value() / denom;
                    if r < rho_lo || r > rho_hi {
                        clamped = true;
                    }
                    r.clamp(rho_lo, rho_hi)
                }
            }
        };
        let mu_new = solve_mean(rho_new)?;
        let change = (rho_new - rho)
            .abs()
            .max((mu_new[0] - mu[0]).abs())
            .max((mu_new[1] - mu[1]).abs());
        rho = rho_new;
        mu = mu_new;
        if change < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "GEE (exchangeable)".into(),
            iterations,
        });
    }

    let (alpha, beta) = match link {
        Link::Identity => (mu[0], mu[1] - mu[0]),
        Link::Logit => (logit(mu[0]), logit(mu[1]) - logit(mu[0])),
    };

    // Per-cluster sandwich pieces with the dispersion factored out:
    // bread blocks v_z * w_j * x x' and scores w_j (ybar - mu_z) x.
    let mut cluster_scores = Vec::with_capacity(moments.len());
    let mut cluster_bread = Vec::with_capacity(moments.len());
    let mut bread = [[0.0f64; 2]; 2];
    for m in &moments {
        let mu_z = mu[usize::from(m.z)];
        let w = m.n / (1.0 + (m.n - 1.0) * rho);
        let zf = f64::from(m.z);
        let score = w * (m.sum_y / m.n - mu_z);
        cluster_scores.push([score, zf * score]);
        let a = variance(mu_z) * w;
        let block = [[a, a * zf], [a * zf, a * zf]];
        for i in 0..2 {
            for j in 0..2 {
                bread[i][j] += block[i][j];
            }
        }
        cluster_bread.push(block);
    }

    Ok(GeeFit {
        glm: GlmFit {
            alpha,
            beta,
            link,
            cluster_scores,
            cluster_bread,
            bread,
            converged,
            iterations,
            n_clusters: moments.len(),
        },
        rho_hat: rho,
        phi_hat: phi,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fixture_ex1, Weighting};
    use crate::iee::iee_estimate;

    #[test]
    fn fixed_zero_matches_iee_pa() {
        let data = fixture_ex1();
        let gee = gee_fit(&data, Link::Logit, RhoMode::Fixed(0.0)).unwrap();
        let iee = iee_estimate(&data, Weighting::ParticipantAverage, Measure::OddsRatio).unwrap();
        assert!((gee.link_scale_estimate - iee.link_scale_estimate).abs() < 1e-8);
        assert!((gee.estimate - 4.0).abs() < 1e-8);
    }

    #[test]
    fn balanced_identity_is_arm_mean_difference_for_any_rho() {
        use crate::data::{ClusterRecord, ObservedDataset, OutcomeKind};
        let data = ObservedDataset::new(
            vec![
                ClusterRecord {
                    cluster_id: "t1".into(),
                    treatment: true,
                    outcomes: vec![2.0, 3.0, 4.0],
                },
                ClusterRecord {
                    cluster_id: "t2".into(),
                    treatment: true,
                    outcomes: vec![5.0, 4.0, 3.0],
                },
                ClusterRecord {
                    cluster_id: "c1".into(),
                    treatment: false,
                    outcomes: vec![1.0, 2.0, 0.0],
                },
                ClusterRecord {
                    cluster_id: "c2".into(),
                    treatment: false,
                    outcomes: vec![2.0, 2.0, 2.0],
                },
            ],
            OutcomeKind::Continuous,
        )
        .unwrap();
        let arm_diff =
            (2.0 + 3.0 + 4.0 + 5.0 + 4.0 + 3.0) / 6.0 - (1.0 + 2.0 + 0.0 + 2.0 + 2.0 + 2.0) / 6.0;
        let est = gee_fit(&data, Link::Identity, RhoMode::Estimate).unwrap();
        assert!((est.estimate - arm_diff).abs() < 1e-10);
        for rho in [0.0, 0.3, 0.9] {
            let f = gee_fit(&data, Link::Identity, RhoMode::Fixed(rho)).unwrap();
            assert!((f.estimate - arm_diff).abs() < 1e-10, "rho={rho}");
        }
    }

    #[test]
    fn high_rho_shifts_towards_cluster_average() {
        let data = fixture_ex1();
        let f = gee_fit(&data, Link::Logit, RhoMode::Fixed(0.99)).unwrap();
        let ca = (25f64 / 9.0).ln();
        let pa = 4f64.ln();
        assert!(f.link_scale_estimate > ca && f.link_scale_estimate < pa);
    }

    #[test]
    fn out_of_range_fixed_rho_is_clamped_with_flag() {
        let data = fixture_ex1();
        let f = gee_fit(&data, Link::Logit, RhoMode::Fixed(1.5)).unwrap();
        assert_eq!(f.diagnostics.get("rho_clamped"), Some(&1.0));
    }
}
