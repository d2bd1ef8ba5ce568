//! Stochastic EM for the latent-subgroup regression.
//!
//! Each iteration runs an M-step on the current hard labels, evaluates the
//! complete-data objective `Q`, computes posterior responsibilities (E-step)
//! and draws fresh labels from them (S-step). The M-step has three stages:
//! site and control fixed effects on all individuals, per-group exposure
//! coefficients on the stage-one residuals, and the multinomial-logit
//! gating model on the labels. Stage one does not depend on the labels, so
//! it is fit once per dataset and reused.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSystem;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::MatrixBundle;
use crate::linmodel::{mnlogit_fit, mvls_fit, pseudo_inverse, GatingWeights, DEFAULT_LAMBDA_FLOOR, DEFAULT_RIDGE};
use crate::parallel;
use crate::projection::project;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct SemConfig {
    pub max_iter: usize,
    /// Trailing window of `Q` values checked for convergence.
    pub window: usize,
    /// Relative range of `Q` over the window below which the run stops.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub lambda_floor: f64,
    /// Minimum group size; `None` means `p + 2`.
    pub min_group: Option<usize>,
    pub ridge: f64,
    /// S-step redraws allowed when a draw leaves a group degenerate.
    pub max_redraws: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            window: 5,
            tol: 1e-4,
            restarts: 20,
            seed: 0,
            lambda_floor: DEFAULT_LAMBDA_FLOOR,
            min_group: None,
            ridge: DEFAULT_RIDGE,
            max_redraws: 10,
        }
    }
}

impl SemConfig {
    pub fn min_group_for(&self, p: usize) -> usize {
        self.min_group.unwrap_or(p + 2)
    }
}

/// Basis coefficients of every spatially varying effect plus noise
/// variances and gating weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per group, `(p+1) x L`.
    pub theta_alpha: Vec<DMatrix<f64>>,
    /// `q x L`
    pub theta_eta: DMatrix<f64>,
    /// `S x L`
    pub theta_gamma: DMatrix<f64>,
    /// Shared diagonal noise variances, length `L`.
    pub lambda: DVector<f64>,
    pub gating: GatingWeights,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.theta_alpha.len()
    }

    pub fn l(&self) -> usize {
        self.lambda.len()
    }

    /// `Z θ^η + U θ^γ`, `n x L`.
    pub fn fixed_means(&self, ds: &Dataset) -> DMatrix<f64> {
        &ds.controls * &self.theta_eta + &ds.sites * &self.theta_gamma
    }

    /// Mean of individual `i` under group `k`, given its fixed part.
    fn mean_row(&self, ds: &Dataset, fixed: &DMatrix<f64>, i: usize, k: usize, l: usize) -> f64 {
        let theta = &self.theta_alpha[k];
        let mut m = fixed[(i, l)];
        for j in 0..theta.nrows() {
            m += ds.exposures[(i, j)] * theta[(j, l)];
        }
        m
    }
}

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Lasir,
    Kmlr,
    Svcm,
}

impl FitMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitMethod::Lasir => "lasir",
            FitMethod::Kmlr => "kmlr",
            FitMethod::Svcm => "svcm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lasir" => Ok(FitMethod::Lasir),
            "kmlr" => Ok(FitMethod::Kmlr),
            "svcm" => Ok(FitMethod::Svcm),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: FitMethod,
    pub params: ModelParams,
    /// `n x K` posterior probabilities at the returned parameters.
    pub responsibilities: DMatrix<f64>,
    /// Zero-based labels used by the last M-step.
    pub labels: Vec<usize>,
    pub q_trace: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
    pub iterations: usize,
    /// Index of the returned replicate.
    pub replicate: usize,
    pub failed_replicates: usize,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.params.k()
    }

    /// Most probable group of each individual at the returned parameters.
    pub fn map_labels(&self) -> Vec<usize> {
        self.responsibilities
            .row_iter()
            .map(|r| r.iter().enumerate().fold(0, |b, (g, &v)| if v > r[b] { g } else { b }))
            .collect()
    }

    pub fn final_q(&self) -> f64 {
        *self.q_trace.last().expect("q trace is never empty")
    }

    pub fn save(&self, path: &Path, extra_meta: &toml::Table) -> Result<()> {
        let mut b = MatrixBundle::new();
        b.meta = extra_meta.clone();
        b.set_meta("kind", "fit");
        b.set_meta("method", self.method.as_str());
        b.set_meta("k", self.k() as i64);
        b.set_meta("l", self.params.l() as i64);
        b.set_meta("converged", self.converged);
        b.set_meta("seed", self.seed.to_string());
        b.set_meta("iterations", self.iterations as i64);
        b.set_meta("replicate", self.replicate as i64);
        b.set_meta("failed_replicates", self.failed_replicates as i64);
        b.set_meta("label_base", 0i64);
        for (k, t) in self.params.theta_alpha.iter().enumerate() {
            b.push(&format!("theta_alpha_{k}"), t.clone());
        }
        b.push("theta_eta", self.params.theta_eta.clone());
        b.push("theta_gamma", self.params.theta_gamma.clone());
        b.push("lambda", DMatrix::from_row_slice(1, self.params.l(), self.params.lambda.as_slice()));
        b.push("gating", self.params.gating.w.clone());
        b.push("responsibilities", self.responsibilities.clone());
        b.push(
            "labels",
            DMatrix::from_iterator(1, self.labels.len(), self.labels.iter().map(|&l| l as f64)),
        );
        b.push("q_trace", DMatrix::from_row_slice(1, self.q_trace.len(), &self.q_trace));
        b.write(path)
    }

    /// Reads a fit bundle; also returns its metadata table.
    pub fn load(path: &Path) -> Result<(Self, toml::Table)> {
        let b = MatrixBundle::read(path)?;
        let k = b.meta_int("k")? as usize;
        let theta_alpha = (0..k)
            .map(|g| b.get(&format!("theta_alpha_{g}")).cloned())
            .collect::<Result<_>>()?;
        let params = ModelParams {
            theta_alpha,
            theta_eta: b.get("theta_eta")?.clone(),
            theta_gamma: b.get("theta_gamma")?.clone(),
            lambda: b.get("lambda")?.transpose().column(0).into_owned(),
            gating: GatingWeights::from_matrix(b.get("gating")?.clone())?,
        };
        let seed = b
            .meta_str("seed")?
            .parse()
            .map_err(|_| Error::MalformedRecord("fit seed is not an integer".into()))?;
        let fit = FitResult {
            method: FitMethod::parse(b.meta_str("method")?)?,
            params,
            responsibilities: b.get("responsibilities")?.clone(),
            labels: b.get("labels")?.iter().map(|&v| v as usize).collect(),
            q_trace: b.get("q_trace")?.iter().copied().collect(),
            converged: b.meta.get("converged").and_then(|v| v.as_bool()).unwrap_or(false),
            seed,
            iterations: b.meta_int("iterations")? as usize,
            replicate: b.meta_int("replicate")? as usize,
            failed_replicates: b.meta_int("failed_replicates")? as usize,
        };
        Ok((fit, b.meta))
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

pub(crate) fn group_members(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &g) in labels.iter().enumerate() {
        groups[g].push(i);
    }
    groups
}

/// Label-independent part of the M-step: the site and control design, its
/// pseudo-inverse, and the regression of the projected outcomes on it over
/// all individuals. Sites without members are left out of the design and
/// get zero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffects {
    /// `[U | Z]` restricted to populated sites, `n x c`.
    pub design: DMatrix<f64>,
    /// `c x n`
    pub pinv: DMatrix<f64>,
    /// Populated site columns of `U`, in order.
    pub present: Vec<usize>,
    pub n_sites: usize,
    /// Coefficients of the outcomes on `design`, `c x L`.
    pub coef: DMatrix<f64>,
    /// Outcomes with the `design` fit removed, `n x L`.
    pub residuals: DMatrix<f64>,
}

impl FixedEffects {
    /// Splits a `c x L` coefficient block into `(θ^γ, θ^η)`.
    fn split(&self, coef: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = coef.ncols();
        let mut gamma = DMatrix::zeros(self.n_sites, l);
        for (r, &site) in self.present.iter().enumerate() {
            gamma.row_mut(site).copy_from(&coef.row(r));
        }
        let eta = coef.rows(self.present.len(), coef.nrows() - self.present.len()).into_owned();
        (gamma, eta)
    }

    /// Regression of the outcomes on sites and controls alone.
    pub fn theta_gamma(&self) -> DMatrix<f64> {
        self.split(&self.coef).0
    }

    pub fn theta_eta(&self) -> DMatrix<f64> {
        self.split(&self.coef).1
    }
}

pub fn fit_fixed_effects(ytilde: &DMatrix<f64>, ds: &Dataset) -> Result<FixedEffects> {
    let n = ds.n();
    if ytilde.nrows() != n {
        return Err(Error::DimensionMismatch("projected outcomes vs dataset rows".into()));
    }
    let s = ds.n_sites();
    let q = ds.q();
    let present: Vec<usize> = (0..s).filter(|&c| ds.sites.column(c).sum() > 0.0).collect();
    let cols = present.len() + q;
    let design = DMatrix::from_fn(n, cols, |i, c| {
        if c < present.len() {
            ds.sites[(i, present[c])]
        } else {
            ds.controls[(i, c - present.len())]
        }
    });
    let pinv = if cols == 0 {
        DMatrix::zeros(0, n)
    } else {
        pseudo_inverse(&design)?
    };
    let coef = &pinv * ytilde;
    let residuals = ytilde - &design * &coef;
    Ok(FixedEffects {
        design,
        pinv,
        present,
        n_sites: s,
        coef,
        residuals,
    })
}

/// M-step on top of precomputed fixed-effect quantities.
///
/// Solves the least-squares problem of the outcomes on sites, controls and
/// group-specific exposures jointly, which is the fixed point of
/// regressing on sites and controls and then regressing the residuals on
/// each group's exposures. Group intercepts and site effects share one
/// direction; it is pinned by making the size-weighted mean of the group
/// intercepts zero. Then fits the gating model on the labels.
pub fn m_step_with_fixed(
    fixed: &FixedEffects,
    ds: &Dataset,
    labels: &[usize],
    k: usize,
    config: &SemConfig,
) -> Result<ModelParams> {
    let n = ds.n();
    if labels.len() != n {
        return Err(Error::DimensionMismatch("labels vs dataset rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&g| g >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    let l = fixed.residuals.ncols();
    let p1 = ds.exposures.ncols();
    let min_group = config.min_group_for(ds.p());
    let groups = group_members(labels, k);
    for (g, rows) in groups.iter().enumerate() {
        if rows.len() < min_group || pseudo_inverse(&select_rows(&ds.exposures, rows)).is_err() {
            return Err(Error::DegenerateGroup { group: g });
        }
    }
    // group-masked exposures with the fixed-effect fit removed
    let blocks = DMatrix::from_fn(n, k * p1, |i, c| {
        if labels[i] == c / p1 {
            ds.exposures[(i, c % p1)]
        } else {
            0.0
        }
    });
    let on_fixed = &fixed.pinv * &blocks;
    let mut design = DMatrix::zeros(n + 1, k * p1);
    design.rows_mut(0, n).copy_from(&(&blocks - &fixed.design * &on_fixed));
    for (g, rows) in groups.iter().enumerate() {
        design[(n, g * p1)] = rows.len() as f64 / n as f64;
    }
    let mut targets = DMatrix::zeros(n + 1, l);
    targets.rows_mut(0, n).copy_from(&fixed.residuals);
    let fit = mvls_fit(&design, &targets, config.lambda_floor).map_err(|e| match e {
        Error::RankDeficient { .. } => {
            let smallest = (0..k).min_by_key(|&g| groups[g].len()).unwrap_or(0);
            Error::DegenerateGroup { group: smallest }
        }
        other => other,
    })?;
    let theta_alpha: Vec<DMatrix<f64>> = (0..k).map(|g| fit.coef.rows(g * p1, p1).into_owned()).collect();
    let (theta_gamma, theta_eta) = fixed.split(&(&fixed.coef - &on_fixed * &fit.coef));
    let lambda = DVector::from_iterator(
        l,
        fit.residuals
            .rows(0, n)
            .column_iter()
            .map(|c| (c.norm_squared() / n as f64).max(config.lambda_floor)),
    );
    let gating = if k == 1 {
        GatingWeights::zeros(1, ds.q() + 1)
    } else {
        mnlogit_fit(&ds.gating_features(), labels, k, config.ridge)?
    };
    Ok(ModelParams {
        theta_alpha,
        theta_eta,
        theta_gamma,
        lambda,
        gating,
    })
}

/// Full M-step given hard labels.
pub fn m_step(ytilde: &DMatrix<f64>, ds: &Dataset, labels: &[usize], k: usize, config: &SemConfig) -> Result<ModelParams> {
    let fixed = fit_fixed_effects(ytilde, ds)?;
    m_step_with_fixed(&fixed, ds, labels, k, config)
}

/// `log f_L + log Pr(group)` for every individual and group (`n x K`).
fn joint_log_terms(ytilde: &DMatrix<f64>, ds: &Dataset, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let n = ds.n();
    let k = params.k();
    let l = params.l();
    if ytilde.nrows() != n || ytilde.ncols() != l {
        return Err(Error::DimensionMismatch("projected outcomes vs parameters".into()));
    }
    let fixed = params.fixed_means(ds);
    let log_norm: f64 = -0.5 * params.lambda.iter().map(|lam| LN_2PI + lam.ln()).sum::<f64>();
    let feats = ds.gating_features();
    let rows = parallel::map_range(n, |i| -> Result<Vec<f64>> {
        let f: Vec<f64> = feats.row(i).iter().copied().collect();
        let log_prior = params.gating.log_probs(&f);
        let mut out = Vec::with_capacity(k);
        for g in 0..k {
            let mut quad = 0.0;
            for c in 0..l {
                let r = ytilde[(i, c)] - params.mean_row(ds, &fixed, i, g, c);
                let term = r * r / params.lambda[c];
                if !term.is_finite() {
                    return Err(Error::NonFiniteDensity {
                        individual: i,
                        coordinate: c,
                    });
                }
                quad += term;
            }
            out.push(log_norm - 0.5 * quad + log_prior[g]);
        }
        Ok(out)
    });
    rows.into_iter().collect()
}

/// Posterior group probabilities, computed in log space.
pub fn e_step(ytilde: &DMatrix<f64>, ds: &Dataset, params: &ModelParams) -> Result<DMatrix<f64>> {
    let terms = joint_log_terms(ytilde, ds, params)?;
    let k = params.k();
    let mut resp = DMatrix::zeros(ds.n(), k);
    for (i, row) in terms.iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = ex.iter().sum();
        for g in 0..k {
            resp[(i, g)] = ex[g] / total;
        }
    }
    Ok(resp)
}

/// Draws one label per row. Categories are visited in order of decreasing
/// probability (index breaks ties) so relabeling the groups relabels the
/// draws.
pub fn s_step<R: Rng + ?Sized>(resp: &DMatrix<f64>, rng: &mut R) -> Vec<usize> {
    let k = resp.ncols();
    let mut order: Vec<usize> = (0..k).collect();
    (0..resp.nrows())
        .map(|i| {
            let u: f64 = rng.random();
            order.sort_by(|&a, &b| resp[(i, b)].total_cmp(&resp[(i, a)]).then(a.cmp(&b)));
            let mut acc = 0.0;
            for &g in &order {
                acc += resp[(i, g)];
                if u < acc {
                    return g;
                }
            }
            *order.iter().rev().find(|&&g| resp[(i, g)] > 0.0).unwrap_or(&order[0])
        })
        .collect()
}

/// Complete-data objective at the given labels.
pub fn q_value(ytilde: &DMatrix<f64>, ds: &Dataset, labels: &[usize], params: &ModelParams) -> Result<f64> {
    let terms = joint_log_terms(ytilde, ds, params)?;
    Ok(labels.iter().zip(&terms).map(|(&g, row)| row[g]).sum())
}

fn q_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    let window = window.max(2);
    if trace.len() < window {
        return false;
    }
    let tail = &trace[trace.len() - window..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = tail.iter().sum::<f64>() / window as f64;
    (max - min) / mean.abs().max(f64::MIN_POSITIVE) < tol
}

/// One SEM chain.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub params: ModelParams,
    pub labels: Vec<usize>,
    pub q_trace: Vec<f64>,
    pub converged: bool,
}

/// RNG for replicate `index` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_init<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Runs a chain from given initial labels. `None` when every redraw left a
/// group degenerate.
pub fn run_chain<R: Rng>(
    ytilde: &DMatrix<f64>,
    ds: &Dataset,
    fixed: &FixedEffects,
    k: usize,
    init: Vec<usize>,
    config: &SemConfig,
    rng: &mut R,
) -> Result<Option<Replicate>> {
    let mut labels = init;
    let mut params = match m_step_with_fixed(fixed, ds, &labels, k, config) {
        Ok(p) => p,
        Err(Error::DegenerateGroup { .. }) | Err(Error::Separation) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=config.max_iter.max(1) {
        trace.push(q_value(ytilde, ds, &labels, &params)?);
        if q_converged(&trace, config.window, config.tol) {
            converged = true;
            break;
        }
        if iter == config.max_iter {
            break;
        }
        let resp = e_step(ytilde, ds, &params)?;
        let mut next = None;
        for _ in 0..=config.max_redraws {
            let cand = s_step(&resp, rng);
            match m_step_with_fixed(fixed, ds, &cand, k, config) {
                Ok(p) => {
                    next = Some((cand, p));
                    break;
                }
                Err(Error::DegenerateGroup { .. }) | Err(Error::Separation) => continue,
                Err(e) => return Err(e),
            }
        }
        match next {
            Some((l, p)) => {
                labels = l;
                params = p;
            }
            None => return Ok(None),
        }
    }
    Ok(Some(Replicate {
        params,
        labels,
        q_trace: trace,
        converged,
    }))
}

/// SEM on already projected outcomes.
pub fn fit_sem_projected(ytilde: &DMatrix<f64>, ds: &Dataset, k: usize, config: &SemConfig) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let n = ds.n();
    let min_group = config.min_group_for(ds.p());
    if n < k * min_group.max(1) {
        return Err(Error::InvalidArgument(format!(
            "n = {n} is too small for K = {k} groups of at least {min_group}"
        )));
    }
    let fixed = fit_fixed_effects(ytilde, ds)?;
    if k == 1 {
        let labels = vec![0; n];
        let params = m_step_with_fixed(&fixed, ds, &labels, 1, config)?;
        let q = q_value(ytilde, ds, &labels, &params)?;
        return Ok(FitResult {
            method: FitMethod::Lasir,
            params,
            responsibilities: DMatrix::from_element(n, 1, 1.0),
            labels,
            q_trace: vec![q],
            converged: true,
            seed: config.seed,
            iterations: 1,
            replicate: 0,
            failed_replicates: 0,
        });
    }
    let restarts = config.restarts.max(1);
    let runs = parallel::map_range(restarts, |r| -> Result<Option<Replicate>> {
        let mut rng = replicate_rng(config.seed, r);
        for _ in 0..=config.max_redraws {
            let init = draw_init(n, k, &mut rng);
            let counts = group_members(&init, k);
            if counts.iter().any(|g| g.len() < min_group) {
                continue;
            }
            return run_chain(ytilde, ds, &fixed, k, init, config, &mut rng);
        }
        Ok(None)
    });
    let mut best: Option<(usize, Replicate)> = None;
    let mut failed = 0;
    for (r, run) in runs.into_iter().enumerate() {
        match run? {
            Some(rep) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => rep.q_trace.last() > b.q_trace.last(),
                };
                if better {
                    best = Some((r, rep));
                }
            }
            None => failed += 1,
        }
    }
    let (replicate, rep) = best.ok_or(Error::NoViableFit)?;
    let responsibilities = e_step(ytilde, ds, &rep.params)?;
    Ok(FitResult {
        method: FitMethod::Lasir,
        iterations: rep.q_trace.len(),
        params: rep.params,
        responsibilities,
        labels: rep.labels,
        q_trace: rep.q_trace,
        converged: rep.converged,
        seed: config.seed,
        replicate,
        failed_replicates: failed,
    })
}

/// Projects the images and runs SEM with `config.restarts` replicates.
pub fn fit_sem(ds: &Dataset, basis: &BasisSystem, k: usize, config: &SemConfig) -> Result<FitResult> {
    let ytilde = project(&ds.images, basis)?.ytilde;
    fit_sem_projected(&ytilde, ds, k, config)
}
