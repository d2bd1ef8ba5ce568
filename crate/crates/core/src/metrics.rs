//! Clustering agreement, coefficient-map errors, detection rates and
//! holdout validation of subgroup projections.

use std::collections::HashMap;

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSystem;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::parallel;
use crate::projection::project;
use crate::sem::{fit_fixed_effects, group_members, m_step_with_fixed, ModelParams, SemConfig};

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))`.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "label vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Mean squared entrywise difference.
pub fn mse_svc(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() || estimate.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs truth {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    Ok((estimate - truth).norm_squared() / estimate.len() as f64)
}

/// Maps each estimated group to a distinct true group so that the number of
/// individuals with matching labels is largest. Exhaustive for up to eight
/// groups, greedy beyond. Unmatched groups map to `None`.
pub fn align_groups(est: &[usize], truth: &[usize], k_est: usize, k_true: usize) -> Vec<Option<usize>> {
    let mut table = vec![vec![0usize; k_true]; k_est];
    for (&e, &t) in est.iter().zip(truth) {
        table[e][t] += 1;
    }
    let mut best = vec![None; k_est];
    if k_est.max(k_true) <= 8 {
        let mut best_score = None;
        let m = k_est.min(k_true);
        // assign the m largest-index-free slots: choose which estimated
        // groups are matched and to which true groups
        for est_sel in (0..k_est).combinations(m) {
            for perm in (0..k_true).permutations(m) {
                let score: usize = est_sel.iter().zip(&perm).map(|(&e, &t)| table[e][t]).sum();
                if best_score.is_none_or(|s| score > s) {
                    best_score = Some(score);
                    best = vec![None; k_est];
                    for (&e, &t) in est_sel.iter().zip(&perm) {
                        best[e] = Some(t);
                    }
                }
            }
        }
    } else {
        let mut cells: Vec<(usize, usize, usize)> = (0..k_est)
            .flat_map(|e| (0..k_true).map(move |t| (e, t, 0)))
            .map(|(e, t, _)| (e, t, table[e][t]))
            .collect();
        cells.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut used = vec![false; k_true];
        for (e, t, _) in cells {
            if best[e].is_none() && !used[t] {
                best[e] = Some(t);
                used[t] = true;
            }
        }
    }
    best
}

/// α-map error: mean over matched groups of the squared error of the
/// `rows` of each group's `(p+1) x d` map.
pub fn alpha_mse(
    est_labels: &[usize],
    est_alpha: &[DMatrix<f64>],
    true_labels: &[usize],
    true_alpha: &[DMatrix<f64>],
    rows: std::ops::Range<usize>,
) -> Result<f64> {
    let map = align_groups(est_labels, true_labels, est_alpha.len(), true_alpha.len());
    let mut total = 0.0;
    let mut count = 0;
    for (e, t) in map.iter().enumerate() {
        if let Some(t) = *t {
            let a = est_alpha[e].rows(rows.start, rows.len()).into_owned();
            let b = true_alpha[t].rows(rows.start, rows.len()).into_owned();
            total += mse_svc(&a, &b)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no groups to compare".into()));
    }
    Ok(total / count as f64)
}

/// Error of the individual-specific maps `β_ij = α_{g_i, j}` over the given
/// exposure rows, averaged over individuals, voxels and rows.
pub fn beta_mse(
    est_labels: &[usize],
    est_alpha: &[DMatrix<f64>],
    true_labels: &[usize],
    true_alpha: &[DMatrix<f64>],
    rows: std::ops::Range<usize>,
) -> Result<f64> {
    if est_labels.len() != true_labels.len() || est_labels.is_empty() {
        return Err(Error::DimensionMismatch("label vectors differ in length".into()));
    }
    let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
    for (&e, &t) in est_labels.iter().zip(true_labels) {
        *pairs.entry((e, t)).or_default() += 1;
    }
    let d = true_alpha[0].ncols();
    let mut total = 0.0;
    for (&(e, t), &c) in pairs.iter().sorted() {
        let a = est_alpha[e].rows(rows.start, rows.len());
        let b = true_alpha[t].rows(rows.start, rows.len());
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch("coefficient map shapes differ".into()));
        }
        total += c as f64 * (a - b).norm_squared();
    }
    Ok(total / (est_labels.len() * d * rows.len()) as f64)
}

/// Detection power and Type-I rate; `None` when the respective voxel set
/// is empty.
pub fn power_type1(reject: &[bool], truth_nonzero: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    if reject.len() != truth_nonzero.len() {
        return Err(Error::DimensionMismatch("rejection map vs truth map".into()));
    }
    let rate = |want: bool| {
        let (hit, tot) = reject
            .iter()
            .zip(truth_nonzero)
            .filter(|(_, &t)| t == want)
            .fold((0usize, 0usize), |(h, n), (&r, _)| (h + r as usize, n + 1));
        (tot > 0).then(|| hit as f64 / tot as f64)
    };
    Ok((rate(true), rate(false)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Within,
    Without,
    Shuffled,
}

impl ValidationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValidationMode::Within => "within",
            ValidationMode::Without => "without",
            ValidationMode::Shuffled => "shuffled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(ValidationMode::Within),
            "without" => Ok(ValidationMode::Without),
            "shuffled" => Ok(ValidationMode::Shuffled),
            other => Err(Error::InvalidArgument(format!("unknown validation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub splits: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            splits: 50,
            holdout_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub mode: ValidationMode,
    /// Holdout mean squared prediction error per split, in voxel space.
    pub mse: Vec<f64>,
    /// Holdout individuals predicted by the pooled model because their
    /// subgroup could not be fit on the training rows.
    pub fallbacks: usize,
}

impl ValidationReport {
    pub fn mean(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }
}

/// Single-group fit on a subset of rows.
fn svcm_on(ytilde: &DMatrix<f64>, ds: &Dataset, rows: &[usize], config: &SemConfig) -> Result<ModelParams> {
    let sub = ds.select_rows(rows);
    let y = DMatrix::from_fn(rows.len(), ytilde.ncols(), |r, c| ytilde[(rows[r], c)]);
    let fixed = fit_fixed_effects(&y, &sub)?;
    m_step_with_fixed(&fixed, &sub, &vec![0; rows.len()], 1, config)
}

fn predict_row(params: &ModelParams, ds: &Dataset, i: usize) -> Vec<f64> {
    let l = params.l();
    let theta = &params.theta_alpha[0];
    let site = ds.site_index()[i];
    (0..l)
        .map(|c| {
            let mut m = params.theta_gamma[(site, c)];
            for j in 0..theta.nrows() {
                m += ds.exposures[(i, j)] * theta[(j, c)];
            }
            for r in 0..ds.q() {
                m += ds.controls[(i, r)] * params.theta_eta[(r, c)];
            }
            m
        })
        .collect()
}

/// Stratified holdout splits by `labels`; per stratum `round(f * size)`
/// members (at least one when the stratum has two or more) are held out.
fn stratified_split(labels: &[usize], k: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for mut members in group_members(labels, k) {
        members.shuffle(rng);
        let size = members.len();
        let mut h = (fraction * size as f64).round() as usize;
        if h == 0 && size >= 2 {
            h = 1;
        }
        hold.extend_from_slice(&members[..h]);
        train.extend_from_slice(&members[h..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

/// Holdout prediction error under the three projection protocols.
///
/// `labels` are the fitted subgroup labels used for stratification. Splits
/// are shared across modes for a given seed, so reports from different
/// modes are paired.
pub fn validate_projection(
    ds: &Dataset,
    basis: &BasisSystem,
    labels: &[usize],
    split: &SplitConfig,
    mode: ValidationMode,
) -> Result<ValidationReport> {
    let ytilde = project(&ds.images, basis)?.ytilde;
    validate_projected(ds, &ytilde, basis, labels, split, mode)
}

pub fn validate_projected(
    ds: &Dataset,
    ytilde: &DMatrix<f64>,
    basis: &BasisSystem,
    labels: &[usize],
    split: &SplitConfig,
    mode: ValidationMode,
) -> Result<ValidationReport> {
    if labels.len() != ds.n() {
        return Err(Error::DimensionMismatch("labels vs dataset rows".into()));
    }
    if split.splits == 0 || !(split.holdout_fraction > 0.0 && split.holdout_fraction < 1.0) {
        return Err(Error::InvalidArgument("need at least one split and a holdout fraction in (0, 1)".into()));
    }
    let k = labels.iter().max().map_or(1, |m| m + 1);
    let config = SemConfig::default();
    let y_sq: Vec<f64> = ds.images.row_iter().map(|r| r.norm_squared()).collect();
    let d = basis.d() as f64;
    let results = parallel::map_range(split.splits, |s| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
        rng.set_stream(s as u64);
        let (train, hold) = stratified_split(labels, k, split.holdout_fraction, &mut rng);
        let groups: Vec<usize> = match mode {
            ValidationMode::Shuffled => {
                let mut g = labels.to_vec();
                g.shuffle(&mut rng);
                g
            }
            _ => labels.to_vec(),
        };
        let pooled = svcm_on(ytilde, ds, &train, &config)?;
        let per_group: Vec<Option<ModelParams>> = match mode {
            ValidationMode::Without => vec![None; k],
            _ => (0..k)
                .map(|g| {
                    let rows: Vec<usize> = train.iter().copied().filter(|&i| groups[i] == g).collect();
                    svcm_on(ytilde, ds, &rows, &config).ok()
                })
                .collect(),
        };
        let mut sse = 0.0;
        let mut fallbacks = 0;
        for &i in &hold {
            let model = match (mode, &per_group[groups[i]]) {
                (ValidationMode::Without, _) => &pooled,
                (_, Some(m)) => m,
                (_, None) => {
                    fallbacks += 1;
                    &pooled
                }
            };
            let mu = predict_row(model, ds, i);
            let cross: f64 = mu.iter().enumerate().map(|(c, m)| m * ytilde[(i, c)]).sum();
            let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
            sse += y_sq[i] - 2.0 * cross + mu_sq;
        }
        Ok((sse / (hold.len() as f64 * d), fallbacks))
    });
    let mut mse = Vec::with_capacity(split.splits);
    let mut fallbacks = 0;
    for r in results {
        let (m, f) = r?;
        mse.push(m);
        fallbacks += f;
    }
    Ok(ValidationReport { mode, mse, fallbacks })
}
