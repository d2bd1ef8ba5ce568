use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::info;

use lasir::baselines::{kmlr_fit, svcm_fit};
use lasir::basis::{build_basis, select_h, BasisSystem, KernelParams};
use lasir::inference::wald_maps;
use lasir::io::{load_dataset, load_ground_truth, read_volume, save_dataset, save_ground_truth, save_volume_map};
use lasir::metrics::{align_groups, alpha_mse, beta_mse, nmi, power_type1, validate_projected, SplitConfig, ValidationMode};
use lasir::projection::{backproject, project};
use lasir::selection::select_k;
use lasir::sem::{fit_sem, FitMethod, FitResult, SemConfig};
use lasir::simgen::{simulate_cube, SimConfig};
use lasir::study::{run_table2, StudyConfig};
use lasir::{Dataset, VoxelLattice};

use crate::manifest::{beside, Manifest};
use crate::{
    BasisArgs, Cli, Command, DataArgs, FitArgs, InferArgs, MetricsArgs, Reproduce, SelectArgs, SemArgs, SimulateArgs,
    Table2Args, ValidateArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Basis(a) => basis(a, threads),
        Command::Simulate(a) => simulate(a, threads),
        Command::Fit(a) => fit(a, threads),
        Command::Select(a) => select(a, threads),
        Command::Infer(a) => infer(a, threads),
        Command::Metrics(a) => metrics(a),
        Command::Validate(a) => validate(a),
        Command::Reproduce(Reproduce::Table2(a)) => table2(a, threads),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad --dims {s:?}"))?;
    match parts[..] {
        [m] => Ok([m; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => bail!("--dims takes one side or XxYxZ, got {s:?}"),
    }
}

fn sem_config(a: &SemArgs) -> SemConfig {
    let d = SemConfig::default();
    SemConfig {
        restarts: a.restarts.unwrap_or(d.restarts),
        seed: a.seed.unwrap_or(d.seed),
        tol: a.tol.unwrap_or(d.tol),
        max_iter: a.max_iter.unwrap_or(d.max_iter),
        ..d
    }
}

fn load_inputs(d: &DataArgs) -> Result<(Dataset, BasisSystem, VoxelLattice)> {
    let (basis, lattice) =
        BasisSystem::load(&d.basis).with_context(|| format!("loading basis {}", d.basis.display()))?;
    let ds = load_dataset(&d.images, &d.covariates, &lattice)
        .with_context(|| format!("loading dataset {}", d.images.display()))?;
    Ok((ds, basis, lattice))
}

fn load_fit(path: &Path, ds: &Dataset) -> Result<FitResult> {
    let (fit, _) = FitResult::load(path).with_context(|| format!("loading fit {}", path.display()))?;
    ensure!(
        fit.labels.len() == ds.n(),
        "{} was fit on {} individuals, dataset has {}",
        path.display(),
        fit.labels.len(),
        ds.n()
    );
    Ok(fit)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn basis(a: BasisArgs, threads: usize) -> Result<()> {
    let lattice = match &a.lattice {
        Some(p) => read_volume(p).with_context(|| format!("reading lattice {}", p.display()))?.0,
        None => VoxelLattice::new(parse_dims(&a.dims)?, lasir::MaskSpec::Full)?,
    };
    let params = KernelParams::new(a.a, a.b)?;
    let h = match (a.h, a.h_ref, a.r0) {
        (Some(h), _, _) => h,
        (None, Some(h_ref), Some(r0)) => select_h(params, h_ref, r0),
        _ => bail!("give --h or both --h-ref and --r0"),
    };
    let basis = build_basis(&lattice, params, h)?;
    basis.save(&lattice, &a.out)?;
    Manifest::new("basis", None, threads, &a)?.write(&beside(&a.out))?;
    println!("h\t{h}\nL\t{}\nd\t{}", basis.l(), basis.d());
    Ok(())
}

fn simulate(a: SimulateArgs, threads: usize) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    if let Some(m) = a.dims {
        cfg.dims = [m; 3];
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let lattice = cfg.lattice()?;
    let (ds, truth) = simulate_cube(&cfg)?;
    save_dataset(&ds, &lattice, &a.out_dir.join("images.toml"), &a.out_dir.join("covariates.csv"))?;
    save_ground_truth(&truth, &a.out_dir.join("truth.toml"))?;
    Manifest::new("simulate", Some(cfg.seed), threads, &cfg)?.write(&a.out_dir.join("manifest.toml"))?;
    println!("n\t{}\nd\t{}\nk\t{}", ds.n(), ds.d(), truth.k());
    Ok(())
}

fn fit(a: FitArgs, threads: usize) -> Result<()> {
    let (ds, basis, _) = load_inputs(&a.data)?;
    let cfg = sem_config(&a.sem);
    let method = FitMethod::parse(&a.method)?;
    let result = match method {
        FitMethod::Lasir => fit_sem(&ds, &basis, a.k, &cfg)?,
        FitMethod::Kmlr => kmlr_fit(&ds, &basis, a.k, &cfg)?,
        FitMethod::Svcm => svcm_fit(&ds, &basis, &cfg)?,
    };
    let manifest = Manifest::new("fit", Some(cfg.seed), threads, &a)?;
    result.save(&a.out, &manifest.meta())?;
    manifest.write(&beside(&a.out))?;
    println!(
        "method\t{}\nk\t{}\nQ\t{:.6}\nconverged\t{}\niterations\t{}",
        method.as_str(),
        result.k(),
        result.final_q(),
        result.converged,
        result.iterations
    );
    Ok(())
}

fn select(a: SelectArgs, threads: usize) -> Result<()> {
    ensure!(a.k_min >= 1 && a.k_min <= a.k_max, "need 1 <= --k-min <= --k-max");
    let (ds, basis, _) = load_inputs(&a.data)?;
    let cfg = sem_config(&a.sem);
    let candidates: Vec<usize> = (a.k_min..=a.k_max).collect();
    let sel = select_k(&ds, &basis, &candidates, &cfg)?;
    let mut out = String::from("K\tM\tQ\tBIC\n");
    for r in &sel.records {
        writeln!(out, "{}\t{}\t{:.6}\t{:.6}", r.k, r.m, r.q, r.bic)?;
    }
    writeln!(out, "chosen_k\t{}", sel.best_k)?;
    print!("{out}");
    if let Some(path) = &a.out {
        let manifest = Manifest::new("select", Some(cfg.seed), threads, &a)?;
        sel.best_fit().save(path, &manifest.meta())?;
        manifest.write(&beside(path))?;
    }
    Ok(())
}

fn infer(a: InferArgs, threads: usize) -> Result<()> {
    ensure!(a.alpha > 0.0 && a.alpha < 1.0, "--alpha must lie in (0, 1)");
    let (ds, basis, lattice) = load_inputs(&a.data)?;
    let fit = load_fit(&a.fit, &ds)?;
    let maps = wald_maps(&fit, &ds, &basis, a.alpha)?;
    let mut out = String::from("k\tj\trejected\tvoxels\tcutoff\tuncorrected_rate\n");
    for m in &maps {
        let reject: Vec<f64> = m.reject.iter().map(|&r| r as u8 as f64).collect();
        let fields: [(&str, &[f64]); 5] =
            [("effect", &m.effect), ("se", &m.se), ("wald", &m.wald), ("pval", &m.pval), ("reject", &reject)];
        for (name, values) in fields {
            let path = a.out_dir.join(format!("k{}_j{}_{name}.toml", m.k, m.j));
            save_volume_map(values, &lattice, &path)?;
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}",
            m.k,
            m.j,
            m.reject.iter().filter(|&&r| r).count(),
            m.reject.len(),
            opt(m.cutoff),
            m.uncorrected_rate(a.alpha)
        )?;
    }
    fs::write(a.out_dir.join("summary.tsv"), &out)?;
    Manifest::new("infer", None, threads, &a)?.write(&a.out_dir.join("manifest.toml"))?;
    print!("{out}");
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    ensure!(a.fit.len() == a.truth.len(), "need one --truth per --fit");
    let with_tests = !a.images.is_empty();
    ensure!(
        !with_tests || (a.images.len() == a.fit.len() && a.covariates.len() == a.fit.len()),
        "power and Type-I need one --images and --covariates per --fit"
    );
    let (basis, lattice) = BasisSystem::load(&a.basis)?;
    let mut out = String::from("replicate\tmethod\tnmi\talpha_mse\tbeta_mse\tpower\ttype1\n");
    for (r, (fit_path, truth_path)) in a.fit.iter().zip(&a.truth).enumerate() {
        let (fit, _) = FitResult::load(fit_path).with_context(|| format!("loading fit {}", fit_path.display()))?;
        let truth = load_ground_truth(truth_path)?;
        ensure!(fit.labels.len() == truth.labels.len(), "fit and truth {r} differ in size");
        let alpha_hat = fit.params.theta_alpha.iter().map(|t| backproject(t, &basis)).collect::<lasir::Result<Vec<_>>>()?;
        let slopes = 1..truth.alpha[0].nrows();
        let (power, type1) = if with_tests {
            let ds = load_dataset(&a.images[r], &a.covariates[r], &lattice)?;
            let map = align_groups(&fit.labels, &truth.labels, fit.k(), truth.k());
            let (mut reject, mut nonzero) = (Vec::new(), Vec::new());
            for m in wald_maps(&fit, &ds, &basis, a.alpha)?.iter().filter(|m| m.j >= 1) {
                if let Some(t) = map[m.k] {
                    reject.extend_from_slice(&m.reject);
                    nonzero.extend(truth.alpha[t].row(m.j).iter().map(|v| v.abs() > 1e-12));
                }
            }
            power_type1(&reject, &nonzero)?
        } else {
            (None, None)
        };
        writeln!(
            out,
            "{r}\t{}\t{:.6}\t{:.6e}\t{:.6e}\t{}\t{}",
            fit.method.as_str(),
            nmi(&fit.labels, &truth.labels)?,
            alpha_mse(&fit.labels, &alpha_hat, &truth.labels, &truth.alpha, slopes.clone())?,
            beta_mse(&fit.labels, &alpha_hat, &truth.labels, &truth.alpha, slopes)?,
            opt(power),
            opt(type1)
        )?;
    }
    print!("{out}");
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let (ds, basis, _) = load_inputs(&a.data)?;
    let fit = load_fit(&a.fit, &ds)?;
    let modes = match a.mode.as_str() {
        "all" => vec![ValidationMode::Within, ValidationMode::Without, ValidationMode::Shuffled],
        m => vec![ValidationMode::parse(m)?],
    };
    let split = SplitConfig {
        splits: a.splits,
        holdout_fraction: a.holdout,
        seed: a.seed,
    };
    let ytilde = project(&ds.images, &basis)?.ytilde;
    let mut out = String::from("replicate\tmode\tmse\n");
    let mut means = String::new();
    for mode in modes {
        let report = validate_projected(&ds, &ytilde, &basis, &fit.labels, &split, mode)?;
        if report.fallbacks > 0 {
            info!("{}: {} holdout rows fell back to the pooled fit", mode.as_str(), report.fallbacks);
        }
        for (s, mse) in report.mse.iter().enumerate() {
            writeln!(out, "{s}\t{}\t{mse:.6}", mode.as_str())?;
        }
        writeln!(means, "mean\t{}\t{:.6}", mode.as_str(), report.mean())?;
    }
    print!("{out}{means}");
    Ok(())
}

fn table2(a: Table2Args, threads: usize) -> Result<()> {
    ensure!(a.reps >= 1, "--reps must be positive");
    let config = StudyConfig {
        side: a.dims,
        n: a.n,
        sigma: a.sigma,
        reps: a.reps,
        seed: a.seed,
        h: a.h,
        k: a.k,
        sem: SemConfig {
            restarts: a.restarts,
            ..SemConfig::default()
        },
        ..StudyConfig::default()
    };
    let report = run_table2(&config)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("replicates.tsv"), report.replicate_table())?;
    let summary = report.summary_table();
    fs::write(a.out_dir.join("summary.tsv"), &summary)?;
    Manifest::new("reproduce table2", Some(a.seed), threads, &a)?.write(&a.out_dir.join("manifest.toml"))?;
    print!("{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_forms() {
        assert_eq!(parse_dims("7").unwrap(), [7, 7, 7]);
        assert_eq!(parse_dims("4x5x6").unwrap(), [4, 5, 6]);
        assert!(parse_dims("4x5").is_err());
        assert!(parse_dims("a").is_err());
    }

    #[test]
    fn unset_sem_flags_keep_library_defaults() {
        assert_eq!(sem_config(&SemArgs::default()), SemConfig::default());
        let c = sem_config(&SemArgs {
            restarts: Some(3),
            ..SemArgs::default()
        });
        assert_eq!(c.restarts, 3);
        assert_eq!(c.tol, SemConfig::default().tol);
    }
}
