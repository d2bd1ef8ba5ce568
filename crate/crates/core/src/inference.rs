//! Voxelwise Wald tests on group-specific coefficient maps.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::basis::BasisSystem;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::sem::{group_members, select_rows, FitResult};

/// Per-group inverse exposure Gram matrices and the shared noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefCovariance {
    /// `G_k = (X_kᵀ X_k)⁻¹`, `(p+1) x (p+1)` per group.
    pub gram_inv: Vec<DMatrix<f64>>,
    pub lambda: DVector<f64>,
}

impl CoefCovariance {
    /// Variance of coefficient `l` of exposure `j` in group `k`.
    pub fn theta_variance(&self, k: usize, j: usize, l: usize) -> f64 {
        self.gram_inv[k][(j, j)] * self.lambda[l]
    }
}

pub fn coef_covariance(fit: &FitResult, ds: &Dataset) -> Result<CoefCovariance> {
    if fit.labels.len() != ds.n() {
        return Err(Error::DimensionMismatch("fit labels vs dataset rows".into()));
    }
    let groups = group_members(&fit.labels, fit.k());
    let gram_inv = groups
        .iter()
        .enumerate()
        .map(|(k, rows)| {
            if rows.is_empty() {
                return Err(Error::SingularGram { group: k });
            }
            let x = select_rows(&ds.exposures, rows);
            let gram = x.transpose() * &x;
            gram.cholesky()
                .map(|c| c.inverse())
                .ok_or(Error::SingularGram { group: k })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefCovariance {
        gram_inv,
        lambda: fit.params.lambda.clone(),
    })
}

/// `Var(α̂_kj(v)) = [G_k]_jj Σ_l λ_l ψ_l(v)²` for every voxel.
pub fn svc_variance(cov: &CoefCovariance, basis: &BasisSystem, k: usize, j: usize) -> Result<Vec<f64>> {
    if k >= cov.gram_inv.len() || j >= cov.gram_inv[k].nrows() {
        return Err(Error::InvalidArgument(format!("no coefficient ({k}, {j})")));
    }
    if cov.lambda.len() != basis.l() {
        return Err(Error::DimensionMismatch("noise variances vs basis size".into()));
    }
    let g = cov.gram_inv[k][(j, j)];
    let psi = basis.psi();
    Ok(parallel::map_range(basis.d(), |v| {
        g * (0..basis.l()).map(|l| cov.lambda[l] * psi[(v, l)] * psi[(v, l)]).sum::<f64>()
    }))
}

/// Two-sided standard normal tail probability of `|w|`.
pub fn two_sided_p(w: f64) -> f64 {
    erfc(w.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Benjamini–Hochberg step-up rejections at level `alpha`.
pub fn fdr_bh(pvals: &[f64], alpha: f64) -> Vec<bool> {
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| pvals[i] <= (rank + 1) as f64 * alpha / m as f64)
        .map(|(_, &i)| pvals[i])
        .next_back();
    match cutoff {
        Some(c) => pvals.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    }
}

/// Test results for one (group, exposure) map.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceMap {
    pub k: usize,
    pub j: usize,
    pub effect: Vec<f64>,
    pub se: Vec<f64>,
    pub wald: Vec<f64>,
    pub pval: Vec<f64>,
    pub reject: Vec<bool>,
    /// Largest p-value rejected by BH, if any.
    pub cutoff: Option<f64>,
}

impl InferenceMap {
    pub fn rejection_rate(&self) -> f64 {
        self.reject.iter().filter(|&&r| r).count() as f64 / self.reject.len() as f64
    }

    /// Fraction of voxels with `p <= level`, no correction.
    pub fn uncorrected_rate(&self, level: f64) -> f64 {
        self.pval.iter().filter(|&&p| p <= level).count() as f64 / self.pval.len() as f64
    }
}

/// Wald map of exposure `j` in group `k`, with BH decisions at `alpha`.
pub fn wald_map_with(cov: &CoefCovariance, fit: &FitResult, basis: &BasisSystem, k: usize, j: usize, alpha: f64) -> Result<InferenceMap> {
    let var = svc_variance(cov, basis, k, j)?;
    let theta = fit.params.theta_alpha[k].row(j).transpose();
    let psi = basis.psi();
    let effect: Vec<f64> = (psi * theta).iter().copied().collect();
    let se: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let wald: Vec<f64> = effect.iter().zip(&se).map(|(e, s)| e.abs() / s).collect();
    let pval: Vec<f64> = wald.iter().map(|&w| two_sided_p(w)).collect();
    let reject = fdr_bh(&pval, alpha);
    let cutoff = pval
        .iter()
        .zip(&reject)
        .filter(|(_, &r)| r)
        .map(|(&p, _)| p)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
    Ok(InferenceMap {
        k,
        j,
        effect,
        se,
        wald,
        pval,
        reject,
        cutoff,
    })
}

pub fn wald_map(fit: &FitResult, ds: &Dataset, basis: &BasisSystem, k: usize, j: usize, alpha: f64) -> Result<InferenceMap> {
    let cov = coef_covariance(fit, ds)?;
    wald_map_with(&cov, fit, basis, k, j, alpha)
}

/// Maps for every group and exposure, ordered by group then exposure.
pub fn wald_maps(fit: &FitResult, ds: &Dataset, basis: &BasisSystem, alpha: f64) -> Result<Vec<InferenceMap>> {
    let cov = coef_covariance(fit, ds)?;
    let mut out = Vec::new();
    for k in 0..fit.k() {
        for j in 0..ds.p() + 1 {
            out.push(wald_map_with(&cov, fit, basis, k, j, alpha)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn bh_hand_example() {
        assert_eq!(fdr_bh(&[0.01, 0.02, 0.04], 0.05), vec![true, true, true]);
        assert_eq!(fdr_bh(&[1.0, 1.0, 1.0], 0.05), vec![false; 3]);
        assert_eq!(fdr_bh(&[0.04], 0.05), vec![true]);
        // step-up: a large later p can rescue earlier ones
        assert_eq!(fdr_bh(&[0.03, 0.04, 0.2], 0.05), vec![false, false, false]);
        assert_eq!(fdr_bh(&[0.02, 0.03, 0.2], 0.05), vec![true, true, false]);
    }

    #[test]
    fn p_values() {
        assert_eq!(two_sided_p(0.0), 1.0);
        assert_abs_diff_eq!(two_sided_p(1.959964), 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(two_sided_p(-1.959964), 0.05, epsilon = 1e-6);
    }

    #[test]
    fn bh_controls_fdr_on_uniform_nulls() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // with every hypothesis null, FDR equals the probability of any rejection
        let reps = 200;
        let mut any = 0;
        for _ in 0..reps {
            let p: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            if fdr_bh(&p, 0.05).into_iter().any(|r| r) {
                any += 1;
            }
        }
        assert!((any as f64 / reps as f64) <= 0.05 + 0.02, "{any}");
    }

    proptest! {
        #[test]
        fn bh_monotone_in_alpha(p in prop::collection::vec(0.0f64..=1.0, 1..60), a1 in 0.001f64..0.5, extra in 0.0f64..0.4) {
            let a2 = a1 + extra;
            let r1 = fdr_bh(&p, a1);
            let r2 = fdr_bh(&p, a2);
            for (x, y) in r1.iter().zip(&r2) {
                prop_assert!(!x || *y);
            }
        }
    }
}
