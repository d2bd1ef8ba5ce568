//! Comparison fits: k-means clustering followed by per-group regression,
//! and the single-group model.

use nalgebra::DMatrix;
use rand::Rng;

use crate::basis::BasisSystem;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::projection::project;
use crate::sem::{e_step, fit_fixed_effects, fit_sem_projected, m_step_with_fixed, q_value, replicate_rng, FitMethod, FitResult, SemConfig};

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `K x L`
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    /// Within-cluster sum of squares after every assignment step.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|l| (points[(i, l)] - centroids[(c, l)]).powi(2)).sum()
}

fn plus_plus_seed<R: Rng>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centroids = DMatrix::zeros(k, points.ncols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter()
                .position(|&w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}

/// Lloyd iterations from given centroids.
pub fn lloyd(points: &DMatrix<f64>, mut centroids: DMatrix<f64>, max_iter: usize) -> KMeans {
    let n = points.nrows();
    let k = centroids.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let assign = parallel::map_range(n, |i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(points, i, &centroids, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        });
        let new_labels: Vec<usize> = assign.iter().map(|a| a.0).collect();
        trace.push(assign.iter().map(|a| a.1).sum());
        let stable = new_labels == labels;
        labels = new_labels;
        if stable {
            break;
        }
        let mut sums = DMatrix::zeros(k, points.ncols());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).copy_from(&mean);
            }
        }
        // an empty cluster takes the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points, a, &centroids, labels[a]).total_cmp(&sq_dist(points, b, &centroids, labels[b]))
                    })
                    .expect("non-empty point set");
                centroids.row_mut(c).copy_from(&points.row(far));
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centroids, labels[i])).sum();
    KMeans {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// k-means++ seeded Lloyd, best of [`KMEANS_RESTARTS`] by inertia.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let runs = parallel::map_range(KMEANS_RESTARTS, |r| {
        let mut rng = replicate_rng(seed, r);
        let init = plus_plus_seed(points, k, &mut rng);
        lloyd(points, init, max_iter)
    });
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart"))
}

fn centroids_of(points: &DMatrix<f64>, labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut sums = DMatrix::zeros(k, points.ncols());
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        row += points.row(i);
    }
    for c in 0..k {
        let m = sums.row(c) / counts[c].max(1) as f64;
        sums.row_mut(c).copy_from(&m);
    }
    sums
}

fn hard_responsibilities(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |i, g| if labels[i] == g { 1.0 } else { 0.0 })
}

/// KMLR on projected outcomes: k-means on the outcomes with site and
/// control effects removed, then the shared M-step; the two alternate until
/// the labels stop changing.
pub fn kmlr_fit_projected(ytilde: &DMatrix<f64>, ds: &Dataset, k: usize, config: &SemConfig) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k == 1 {
        let mut fit = svcm_fit_projected(ytilde, ds, config)?;
        fit.method = FitMethod::Kmlr;
        return Ok(fit);
    }
    let fixed = fit_fixed_effects(ytilde, ds)?;
    let min_group = config.min_group_for(ds.p());
    let mut failed = 0;
    for attempt in 0..=config.max_redraws {
        let seed = config.seed.wrapping_add(attempt as u64);
        let mut labels = kmeans(&fixed.residuals, k, seed, KMEANS_MAX_ITER)?.labels;
        let mut trace = Vec::new();
        let mut converged = false;
        let mut params = None;
        for _ in 0..config.max_iter.max(1) {
            if crate::sem::group_members(&labels, k).iter().any(|g| g.len() < min_group) {
                break;
            }
            let p = match m_step_with_fixed(&fixed, ds, &labels, k, config) {
                Ok(p) => p,
                Err(Error::DegenerateGroup { .. }) | Err(Error::Separation) => break,
                Err(e) => return Err(e),
            };
            trace.push(q_value(ytilde, ds, &labels, &p)?);
            // outcomes with the current site and control effects removed
            let points = ytilde - p.fixed_means(ds);
            params = Some(p);
            let next = lloyd(&points, centroids_of(&points, &labels, k), KMEANS_MAX_ITER).labels;
            if next == labels {
                converged = true;
                break;
            }
            labels = next;
            params = None;
        }
        match params {
            Some(params) => {
                return Ok(FitResult {
                    method: FitMethod::Kmlr,
                    params,
                    responsibilities: hard_responsibilities(&labels, k),
                    labels,
                    iterations: trace.len(),
                    q_trace: trace,
                    converged,
                    seed: config.seed,
                    replicate: attempt,
                    failed_replicates: failed,
                });
            }
            None => failed += 1,
        }
    }
    Err(Error::NoViableFit)
}

pub fn kmlr_fit(ds: &Dataset, basis: &BasisSystem, k: usize, config: &SemConfig) -> Result<FitResult> {
    let ytilde = project(&ds.images, basis)?.ytilde;
    kmlr_fit_projected(&ytilde, ds, k, config)
}

/// The single-group model: one M-step with every individual in one group.
pub fn svcm_fit_projected(ytilde: &DMatrix<f64>, ds: &Dataset, config: &SemConfig) -> Result<FitResult> {
    let mut fit = fit_sem_projected(ytilde, ds, 1, config)?;
    fit.method = FitMethod::Svcm;
    Ok(fit)
}

pub fn svcm_fit(ds: &Dataset, basis: &BasisSystem, config: &SemConfig) -> Result<FitResult> {
    let ytilde = project(&ds.images, basis)?.ytilde;
    svcm_fit_projected(&ytilde, ds, config)
}

/// Posterior responsibilities of an arbitrary fit, for reporting.
pub fn soft_assignments(ytilde: &DMatrix<f64>, ds: &Dataset, fit: &FitResult) -> Result<DMatrix<f64>> {
    e_step(ytilde, ds, &fit.params)
}
