//! Regression primitives: diagonal-covariance multivariate least squares and
//! multinomial-logit maximum likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value tolerance for declaring a design rank deficient.
pub const RANK_TOL: f64 = 1e-10;
pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-10;
pub const DEFAULT_RIDGE: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_GRAD_TOL: f64 = 1e-8;

/// Column-wise least-squares fit with one residual variance per target.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianFit {
    /// `c x L`
    pub coef: DMatrix<f64>,
    /// Mean squared residual per target column, floored.
    pub lambda: DVector<f64>,
    /// `n x L`
    pub residuals: DMatrix<f64>,
}

/// Least squares of every target column on `design`, via a thin SVD of the
/// design. No pseudo-inverse fallback: a design whose smallest singular
/// value is below [`RANK_TOL`] times the largest is an error.
pub fn mvls_fit(design: &DMatrix<f64>, targets: &DMatrix<f64>, lambda_floor: f64) -> Result<DiagGaussianFit> {
    let (n, c) = design.shape();
    if targets.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, targets have {}",
            targets.nrows()
        )));
    }
    if n < c || c == 0 {
        return Err(Error::RankDeficient {
            smallest: 0.0,
            largest: 0.0,
        });
    }
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    if !(largest > 0.0) || smallest < RANK_TOL * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut ut_t = u.transpose() * targets;
    for (r, s) in sv.iter().enumerate() {
        ut_t.row_mut(r).unscale_mut(*s);
    }
    let coef = v_t.transpose() * ut_t;
    let residuals = targets - design * &coef;
    let lambda = DVector::from_iterator(
        targets.ncols(),
        residuals
            .column_iter()
            .map(|col| (col.norm_squared() / n as f64).max(lambda_floor)),
    );
    Ok(DiagGaussianFit {
        coef,
        lambda,
        residuals,
    })
}

/// Moore–Penrose inverse of a full-column-rank design, `c x n`.
pub fn pseudo_inverse(design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, c) = design.shape();
    if n < c || c == 0 {
        return Err(Error::RankDeficient {
            smallest: 0.0,
            largest: 0.0,
        });
    }
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (largest, smallest) = (sv.max(), sv.min());
    if !(largest > 0.0) || smallest < RANK_TOL * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    let mut ut = svd.u.expect("requested U").transpose();
    for (r, s) in sv.iter().enumerate() {
        ut.row_mut(r).unscale_mut(*s);
    }
    Ok(svd.v_t.expect("requested V").transpose() * ut)
}

/// Multinomial-logit weights, `K x (q+1)`, with the last row pinned at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    pub w: DMatrix<f64>,
}

impl GatingWeights {
    pub fn zeros(k: usize, features: usize) -> Self {
        Self {
            w: DMatrix::zeros(k, features),
        }
    }

    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.row(w.nrows() - 1).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(
                "gating weights need a zero reference row".into(),
            ));
        }
        Ok(Self { w })
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn probs(&self, features: &[f64]) -> Vec<f64> {
        gating_probs(&self.w, features)
    }

    pub fn log_probs(&self, features: &[f64]) -> Vec<f64> {
        log_softmax(&logits(&self.w, features))
    }
}

fn logits(w: &DMatrix<f64>, features: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|k| features.iter().enumerate().map(|(f, z)| w[(k, f)] * z).sum())
        .collect()
}

fn log_softmax(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    eta.iter().map(|e| e - lse).collect()
}

/// Softmax of `w_k · features` with max subtraction.
pub fn gating_probs(w: &DMatrix<f64>, features: &[f64]) -> Vec<f64> {
    let eta = logits(w, features);
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / total).collect()
}

/// Unpenalized log-likelihood `Σ_i log Pr(label_i | w, features_i)`.
pub fn mnlogit_loglik(w: &DMatrix<f64>, features: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut row = vec![0.0; features.ncols()];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            for (f, r) in row.iter_mut().enumerate() {
                *r = features[(i, f)];
            }
            log_softmax(&logits(w, &row))[y]
        })
        .sum()
}

/// Ridge-penalized Newton ascent on the free `(K-1)(q+1)` weights.
///
/// `labels` are zero-based in `0..k`. Stops when the gradient sup-norm drops
/// below 1e-8, when step halving can no longer improve the objective, or
/// after 50 iterations.
pub fn mnlogit_fit(features: &DMatrix<f64>, labels: &[usize], k: usize, ridge: f64) -> Result<GatingWeights> {
    let (n, nf) = features.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch("labels vs feature rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    if k <= 1 {
        return Ok(GatingWeights::zeros(k.max(1), nf));
    }
    let free = (k - 1) * nf;
    let to_matrix = |theta: &DVector<f64>| {
        DMatrix::from_fn(k, nf, |c, f| if c + 1 == k { 0.0 } else { theta[c * nf + f] })
    };
    let objective = |theta: &DVector<f64>| {
        mnlogit_loglik(&to_matrix(theta), features, labels) - 0.5 * ridge * theta.norm_squared()
    };

    let mut theta = DVector::zeros(free);
    let mut obj = objective(&theta);
    let mut row = vec![0.0; nf];
    for _ in 0..NEWTON_MAX_ITER {
        if !obj.is_finite() {
            return Err(Error::Separation);
        }
        let w = to_matrix(&theta);
        let mut grad = -ridge * &theta;
        let mut hess = DMatrix::<f64>::identity(free, free) * ridge;
        for i in 0..n {
            for (f, r) in row.iter_mut().enumerate() {
                *r = features[(i, f)];
            }
            let p = gating_probs(&w, &row);
            for c in 0..k - 1 {
                let resid = if labels[i] == c { 1.0 } else { 0.0 } - p[c];
                for f in 0..nf {
                    grad[c * nf + f] += resid * row[f];
                }
                for c2 in 0..k - 1 {
                    let weight = p[c] * (if c == c2 { 1.0 } else { 0.0 } - p[c2]);
                    if weight == 0.0 {
                        continue;
                    }
                    for f in 0..nf {
                        for f2 in 0..nf {
                            hess[(c * nf + f, c2 * nf + f2)] += weight * row[f] * row[f2];
                        }
                    }
                }
            }
        }
        if grad.amax() < NEWTON_GRAD_TOL {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Separation),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &theta + t * &step;
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj {
                theta = cand;
                obj = cand_obj;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if !obj.is_finite() || theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Separation);
    }
    GatingWeights::from_matrix(to_matrix(&theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_linear_targets_floor_lambda() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let coef = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let y = &x * &coef;
        let fit = mvls_fit(&x, &y, 1e-10).unwrap();
        assert!((fit.coef - coef).amax() < 1e-12);
        assert!(fit.lambda.iter().all(|&l| l == 1e-10));
    }

    #[test]
    fn intercept_only_gives_column_means() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 4.0, 3.0, 0.0, 6.0, 0.0]);
        let fit = mvls_fit(&x, &y, 1e-10).unwrap();
        assert_abs_diff_eq!(fit.coef[(0, 0)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.coef[(0, 1)], 1.0, epsilon = 1e-14);
        // residuals of column 0: -2, -1, 0, 3 -> mean square 14/4
        assert_abs_diff_eq!(fit.lambda[0], 3.5, epsilon = 1e-13);
    }

    #[test]
    fn three_point_slope() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let fit = mvls_fit(&x, &y, 1e-10).unwrap();
        // (xᵀx)⁻¹ xᵀy = 5 / 5
        assert_abs_diff_eq!(fit.coef[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_deficient_design_is_an_error() {
        let x = DMatrix::from_fn(5, 3, |i, j| if j == 2 { 2.0 * i as f64 } else if j == 1 { i as f64 } else { 1.0 });
        let err = mvls_fit(&x, &DMatrix::zeros(5, 1), 1e-10).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        assert!(err.to_string().contains("smallest singular value"));
        assert!(mvls_fit(&DMatrix::zeros(2, 3), &DMatrix::zeros(2, 1), 1e-10).is_err());
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_design(seed in 0u64..500, n in 6usize..40, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, c, |_, _| rng.random_range(-2.0..2.0));
            let y = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-5.0..5.0));
            let fit = mvls_fit(&x, &y, 1e-10).unwrap();
            prop_assert!((x.transpose() * &fit.residuals).amax() < 1e-8);
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            w in proptest::collection::vec(-5.0f64..5.0, 6),
            z in -3.0f64..3.0,
            shift in -50.0f64..50.0,
        ) {
            let mut m = DMatrix::from_row_slice(3, 2, &w);
            m.row_mut(2).fill(0.0);
            let p = gating_probs(&m, &[1.0, z]);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            let mut shifted = m.clone();
            for k in 0..3 { shifted[(k, 0)] += shift; }
            let q = gating_probs(&shifted, &[1.0, z]);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let zero = DMatrix::zeros(4, 2);
        assert!(gating_probs(&zero, &[1.0, 0.3]).iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let w = DMatrix::from_row_slice(3, 2, &[-0.6, 1.0, 0.5, 1.0, 0.0, 0.0]);
        let p = gating_probs(&w, &[1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.1716, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.5156, epsilon = 1e-4);
        assert_abs_diff_eq!(p[2], 0.3127, epsilon = 1e-4);
    }

    #[test]
    fn all_reference_labels_stay_finite() {
        let feats = DMatrix::from_fn(30, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 - 15.0) / 7.0 });
        let labels = vec![2usize; 30];
        let g = mnlogit_fit(&feats, &labels, 3, DEFAULT_RIDGE).unwrap();
        assert!(g.w.iter().all(|v| v.is_finite()));
        assert!(g.w[(0, 0)] < 0.0 && g.w[(1, 0)] < 0.0);
        for i in 0..30 {
            let p = g.probs(&[1.0, feats[(i, 1)]]);
            assert!(p[2] > p[0] && p[2] > p[1]);
        }
    }

    #[test]
    fn balanced_intercept_only() {
        let feats = DMatrix::from_element(40, 1, 1.0);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let g = mnlogit_fit(&feats, &labels, 2, DEFAULT_RIDGE).unwrap();
        assert!(g.w[(0, 0)].abs() < 1e-8);
        assert_eq!(g.w[(1, 0)], 0.0);
    }

    #[test]
    fn recovers_simulated_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = DMatrix::from_row_slice(3, 2, &[-0.6, 1.0, 0.5, 1.0, 0.0, 0.0]);
        let normal = Normal::new(0.0, 2f64.sqrt()).unwrap();
        let n = 200;
        let feats = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) });
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let p = gating_probs(&truth, &[1.0, feats[(i, 1)]]);
                let u: f64 = rng.random();
                if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 }
            })
            .collect();
        let fit = mnlogit_fit(&feats, &labels, 3, DEFAULT_RIDGE).unwrap();
        assert!((&fit.w - &truth).amax() < 0.8, "{}", fit.w);
        assert!(mnlogit_loglik(&fit.w, &feats, &labels) >= mnlogit_loglik(&truth, &feats, &labels));
    }

    #[test]
    fn single_class_is_trivial() {
        let feats = DMatrix::from_element(5, 2, 1.0);
        let g = mnlogit_fit(&feats, &[0; 5], 1, DEFAULT_RIDGE).unwrap();
        assert_eq!(g.w, DMatrix::zeros(1, 2));
        assert!(mnlogit_fit(&feats, &[0, 1, 0, 0, 3], 3, DEFAULT_RIDGE).is_err());
    }
}
