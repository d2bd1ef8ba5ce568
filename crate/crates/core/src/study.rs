//! Replicated cube simulation comparing the subgroup fit with the
//! k-means and single-group baselines.

use std::fmt::Write as _;

use log::info;
use nalgebra::DMatrix;

use crate::baselines::{kmlr_fit_projected, svcm_fit_projected};
use crate::basis::{build_basis, BasisSystem, KernelParams};
use crate::error::Result;
use crate::metrics::{alpha_mse, beta_mse, mse_svc, nmi};
use crate::projection::{backproject, project};
use crate::sem::{fit_sem_projected, FitMethod, FitResult, SemConfig};
use crate::simgen::{simulate_cube, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub side: usize,
    pub n: usize,
    pub sigma: f64,
    pub reps: usize,
    pub seed: u64,
    /// Analysis basis degree.
    pub h: usize,
    pub kernel: KernelParams,
    pub k: usize,
    pub sem: SemConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            side: 15,
            n: 500,
            sigma: 1.0,
            reps: 10,
            seed: 0,
            h: 12,
            kernel: KernelParams::simulation(),
            k: 3,
            sem: SemConfig {
                restarts: 10,
                ..SemConfig::default()
            },
        }
    }
}

/// Scores of one method on one replicate. NMI and α-MSE are absent for the
/// single-group model.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub rep: usize,
    pub method: FitMethod,
    pub nmi: Option<f64>,
    /// Slope maps, groups matched to truth.
    pub alpha_mse: Option<f64>,
    /// Individual slope maps.
    pub beta_mse: f64,
    pub eta_mse: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub scores: Vec<MethodScore>,
}

impl StudyReport {
    pub fn for_method(&self, m: FitMethod) -> impl Iterator<Item = &MethodScore> {
        self.scores.iter().filter(move |s| s.method == m)
    }

    fn mean_of(&self, m: FitMethod, f: impl Fn(&MethodScore) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.for_method(m).filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_nmi(&self, m: FitMethod) -> Option<f64> {
        self.mean_of(m, |s| s.nmi)
    }

    pub fn mean_alpha_mse(&self, m: FitMethod) -> Option<f64> {
        self.mean_of(m, |s| s.alpha_mse)
    }

    pub fn mean_beta_mse(&self, m: FitMethod) -> Option<f64> {
        self.mean_of(m, |s| Some(s.beta_mse))
    }

    pub fn mean_eta_mse(&self, m: FitMethod) -> Option<f64> {
        self.mean_of(m, |s| Some(s.eta_mse))
    }

    /// Replicates in which LASIR's β-MSE is below both baselines.
    pub fn lasir_beta_wins(&self) -> usize {
        (0..self.config.reps)
            .filter(|&r| {
                let get = |m| self.scores.iter().find(|s| s.rep == r && s.method == m).map(|s| s.beta_mse);
                match (get(FitMethod::Lasir), get(FitMethod::Kmlr), get(FitMethod::Svcm)) {
                    (Some(l), Some(k), Some(s)) => l < k && l < s,
                    _ => false,
                }
            })
            .count()
    }

    /// Per-replicate rows as tab-separated text.
    pub fn replicate_table(&self) -> String {
        let mut out = String::from("rep\tmethod\tnmi\talpha_mse\tbeta_mse\teta_mse\tconverged\n");
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6e}"));
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{}",
                s.rep,
                s.method.as_str(),
                opt(s.nmi),
                opt(s.alpha_mse),
                s.beta_mse,
                s.eta_mse,
                s.converged
            );
        }
        out
    }

    /// Averages in the layout of the simulation results table; MSE blocks
    /// are scaled by 1e3.
    pub fn summary_table(&self) -> String {
        let methods = [FitMethod::Kmlr, FitMethod::Lasir, FitMethod::Svcm];
        let cell = |v: Option<f64>, scale: f64| v.map_or("NA".to_string(), |x| format!("{:.3}", x * scale));
        let mut out = format!(
            "# d = {}^3, n = {}, sigma = {}, replicates = {}\nblock\tmethod\tvalue\n",
            self.config.side, self.config.n, self.config.sigma, self.config.reps
        );
        let blocks: [(&str, f64, &dyn Fn(FitMethod) -> Option<f64>); 4] = [
            ("NMI", 1.0, &|m| self.mean_nmi(m)),
            ("alpha_MSE_x1e3", 1e3, &|m| self.mean_alpha_mse(m)),
            ("beta_MSE_x1e3", 1e3, &|m| self.mean_beta_mse(m)),
            ("eta_MSE", 1.0, &|m| self.mean_eta_mse(m)),
        ];
        for (name, scale, f) in blocks {
            for m in methods {
                let v = f(m);
                if v.is_some() {
                    let _ = writeln!(out, "{name}\t{}\t{}", m.as_str(), cell(v, scale));
                }
            }
        }
        out
    }
}

fn score(rep: usize, fit: &FitResult, truth: &crate::dataset::GroundTruth, basis: &BasisSystem) -> Result<MethodScore> {
    let alpha_hat: Vec<DMatrix<f64>> = fit
        .params
        .theta_alpha
        .iter()
        .map(|t| backproject(t, basis))
        .collect::<Result<_>>()?;
    let multi = fit.method != FitMethod::Svcm;
    let eta_hat = backproject(&fit.params.theta_eta, basis)?;
    Ok(MethodScore {
        rep,
        method: fit.method,
        nmi: if multi { Some(nmi(&fit.labels, &truth.labels)?) } else { None },
        alpha_mse: if multi {
            Some(alpha_mse(&fit.labels, &alpha_hat, &truth.labels, &truth.alpha, 1..2)?)
        } else {
            None
        },
        beta_mse: beta_mse(&fit.labels, &alpha_hat, &truth.labels, &truth.alpha, 1..2)?,
        eta_mse: mse_svc(&eta_hat, &truth.eta)?,
        converged: fit.converged,
    })
}

/// Runs every replicate; replicate `r` simulates with seed `seed + r` and
/// fits with the same seed.
pub fn run_table2(config: &StudyConfig) -> Result<StudyReport> {
    let sim0 = SimConfig::cube(config.side, config.n, config.sigma, config.seed);
    let lattice = sim0.lattice()?;
    let basis = build_basis(&lattice, config.kernel, config.h)?;
    let mut scores = Vec::new();
    for rep in 0..config.reps {
        let seed = config.seed.wrapping_add(rep as u64);
        let sim = SimConfig { seed, ..sim0.clone() };
        let (ds, truth) = simulate_cube(&sim)?;
        let ytilde = project(&ds.images, &basis)?.ytilde;
        let sem = SemConfig { seed, ..config.sem.clone() };
        let fits = [
            fit_sem_projected(&ytilde, &ds, config.k, &sem)?,
            kmlr_fit_projected(&ytilde, &ds, config.k, &sem)?,
            svcm_fit_projected(&ytilde, &ds, &sem)?,
        ];
        for fit in &fits {
            let s = score(rep, fit, &truth, &basis)?;
            info!(
                "rep {rep} {}: nmi {:?} beta_mse {:.4e}",
                fit.method.as_str(),
                s.nmi,
                s.beta_mse
            );
            scores.push(s);
        }
    }
    Ok(StudyReport {
        config: config.clone(),
        scores,
    })
}
