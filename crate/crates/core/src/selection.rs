//! Choosing the number of subgroups by BIC.

use log::warn;
use nalgebra::DMatrix;

use crate::basis::BasisSystem;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::projection::project;
use crate::sem::{fit_sem_projected, FitResult, SemConfig};

/// Free-parameter count `KL(p+1) + KL + (S+q)L + (K-1)(q+1) + L`.
///
/// The `KL` term counts per-group variances even though the likelihood
/// shares one diagonal across groups; the count is kept as is.
pub fn param_count(k: usize, l: usize, p: usize, q: usize, s: usize) -> usize {
    k * l * (p + 1) + k * l + (s + q) * l + k.saturating_sub(1) * (q + 1) + l
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicRecord {
    pub k: usize,
    pub m: usize,
    pub q: f64,
    pub bic: f64,
}

impl BicRecord {
    pub fn new(k: usize, m: usize, q: f64, n: usize, l: usize) -> Self {
        let bic = m as f64 * ((n * l) as f64).ln() - 2.0 * q;
        Self { k, m, q, bic }
    }

    /// Record for a finished fit on `n` individuals.
    pub fn from_fit(fit: &FitResult, ds: &Dataset) -> Self {
        let l = fit.params.l();
        let m = param_count(fit.k(), l, ds.p(), ds.q(), ds.n_sites());
        Self::new(fit.k(), m, fit.final_q(), ds.n(), l)
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best_k: usize,
    pub records: Vec<BicRecord>,
    pub fits: Vec<FitResult>,
}

impl Selection {
    pub fn best_fit(&self) -> &FitResult {
        self.fits.iter().find(|f| f.k() == self.best_k).expect("best fit is stored")
    }
}

/// Index of the smallest BIC, earliest (smallest K) on ties.
fn argmin_bic(records: &[BicRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let cur = &records[b];
                if r.bic < cur.bic || (r.bic == cur.bic && r.k < cur.k) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

pub fn select_k_projected(
    ytilde: &DMatrix<f64>,
    ds: &Dataset,
    candidates: &[usize],
    config: &SemConfig,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate K values".into()));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut records = Vec::new();
    let mut fits = Vec::new();
    for &k in &ks {
        match fit_sem_projected(ytilde, ds, k, config) {
            Ok(fit) => {
                records.push(BicRecord::from_fit(&fit, ds));
                fits.push(fit);
            }
            Err(Error::NoViableFit) => warn!("K = {k}: every replicate failed, candidate dropped"),
            Err(e) => return Err(e),
        }
    }
    let best = argmin_bic(&records).ok_or(Error::NoViableFit)?;
    Ok(Selection {
        best_k: records[best].k,
        records,
        fits,
    })
}

/// Fits every candidate and returns the K with the smallest BIC.
pub fn select_k(ds: &Dataset, basis: &BasisSystem, candidates: &[usize], config: &SemConfig) -> Result<Selection> {
    let ytilde = project(&ds.images, basis)?.ytilde;
    select_k_projected(&ytilde, ds, candidates, config)
}
