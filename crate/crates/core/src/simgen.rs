//! Synthetic cube-shaped datasets with known subgroup structure.

use log::info;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::basis::{build_basis, BasisSystem, KernelParams};
use crate::dataset::{encode_sites, Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::lattice::VoxelLattice;
use crate::linmodel::gating_probs;
use crate::parallel;

const STREAM_COVARIATES: u64 = 0;
const STREAM_FIELDS: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Cube half-width and taper sd of the sparse center map.
const CUBE_HALF_WIDTH: f64 = 0.4;
const CUBE_TAPER_SD: f64 = 0.1;
/// Beyond this sup-norm radius the sparse map is set to zero.
const CUBE_SUPPORT: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeMap {
    /// A draw from the simulation Gaussian process.
    Gp,
    /// `sin(4x) + cos(4y) - sin(4z)`
    Trig,
    /// Smoothed indicator of the center cube.
    CenterCube,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptMap {
    Gp,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dims: [usize; 3],
    pub n: usize,
    pub sigma: f64,
    pub gp_a: f64,
    pub gp_b: f64,
    /// Highest Hermite degree of the basis used for GP draws.
    pub gp_degree: usize,
    /// `K x 2` gating weights on `(1, z)`, last row zero.
    pub gating: Vec<Vec<f64>>,
    /// One slope map per group.
    pub slopes: Vec<SlopeMap>,
    pub intercept: InterceptMap,
    pub n_sites: usize,
    pub site_sd: f64,
    pub control_sd: f64,
    pub x_sd: f64,
    pub z_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dims: [25, 25, 25],
            n: 1000,
            sigma: 1.0,
            gp_a: 0.01,
            gp_b: 2.0,
            gp_degree: 12,
            gating: vec![vec![-0.6, 1.0], vec![0.5, 1.0], vec![0.0, 0.0]],
            slopes: vec![SlopeMap::Gp, SlopeMap::Trig, SlopeMap::CenterCube],
            intercept: InterceptMap::Gp,
            n_sites: 21,
            site_sd: 0.2,
            control_sd: 0.2,
            x_sd: 1.0,
            z_sd: std::f64::consts::SQRT_2,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Cube design at a given size.
    pub fn cube(side: usize, n: usize, sigma: f64, seed: u64) -> Self {
        Self {
            dims: [side; 3],
            n,
            sigma,
            seed,
            ..Self::default()
        }
    }

    /// A single group with the given maps.
    pub fn single_group(side: usize, n: usize, sigma: f64, slope: SlopeMap, intercept: InterceptMap, seed: u64) -> Self {
        Self {
            gating: vec![vec![0.0, 0.0]],
            slopes: vec![slope],
            intercept,
            ..Self::cube(side, n, sigma, seed)
        }
    }

    pub fn k(&self) -> usize {
        self.slopes.len()
    }

    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::new(self.gp_a, self.gp_b)
    }

    pub fn lattice(&self) -> Result<VoxelLattice> {
        VoxelLattice::new(self.dims, crate::lattice::MaskSpec::Full)
    }

    pub fn gating_matrix(&self) -> DMatrix<f64> {
        let k = self.gating.len();
        DMatrix::from_fn(k, 2, |r, c| self.gating[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n == 0 || self.n_sites == 0 {
            return bad("n and n_sites must be positive".into());
        }
        if self.slopes.is_empty() {
            return bad("at least one group is required".into());
        }
        if self.gating.len() != self.k() || self.gating.iter().any(|r| r.len() != 2) {
            return bad(format!("gating must be {} x 2", self.k()));
        }
        if self.gating[self.k() - 1].iter().any(|&v| v != 0.0) {
            return bad("last gating row must be zero".into());
        }
        self.kernel().map(|_| ())
    }
}

/// Largest basis of degree `<= h` that builds on the lattice.
pub fn simulation_basis(lattice: &VoxelLattice, params: KernelParams, h: usize) -> Result<BasisSystem> {
    let mut last = None;
    for deg in (0..=h).rev() {
        match build_basis(lattice, params, deg) {
            Ok(b) => {
                if deg < h {
                    info!("simulation basis reduced to degree {deg}");
                }
                return Ok(b);
            }
            Err(e @ (Error::BasisExceedsLattice { .. } | Error::DegenerateBasis { .. })) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("degree 0 was attempted"))
}

/// Truncated Karhunen–Loève draw `Σ_l sqrt(e_l) ξ_l ψ_l`.
pub fn sample_gp<R: Rng + ?Sized>(basis: &BasisSystem, rng: &mut R) -> Vec<f64> {
    let xi: Vec<f64> = (0..basis.l()).map(|_| rng.sample(StandardNormal)).collect();
    gp_field(basis, &xi)
}

/// Field for given standard normal scores.
pub fn gp_field(basis: &BasisSystem, xi: &[f64]) -> Vec<f64> {
    let psi = basis.psi();
    let e = basis.eigvals();
    (0..basis.d())
        .map(|v| (0..basis.l()).map(|l| e[l].sqrt() * xi[l] * psi[(v, l)]).sum())
        .collect()
}

/// Factor that brings the total variance of a KL draw up to the trace of
/// the kernel on the lattice, so fields have roughly unit variance.
pub fn gp_scale(lattice: &VoxelLattice, basis: &BasisSystem) -> f64 {
    let a = basis.params().a;
    let trace: f64 = lattice
        .coords()
        .iter()
        .map(|v| (-2.0 * a * v.iter().map(|x| x * x).sum::<f64>()).exp())
        .sum();
    (trace / basis.eigvals().iter().sum::<f64>()).sqrt()
}

pub fn trig_map(v: &[f64; 3]) -> f64 {
    (4.0 * v[0]).sin() + (4.0 * v[1]).cos() - (4.0 * v[2]).sin()
}

pub fn center_cube_map(v: &[f64; 3]) -> f64 {
    if v.iter().any(|x| x.abs() > CUBE_SUPPORT) {
        return 0.0;
    }
    let std = NormalDist::standard();
    v.iter()
        .map(|&x| std.cdf((x + CUBE_HALF_WIDTH) / CUBE_TAPER_SD) - std.cdf((x - CUBE_HALF_WIDTH) / CUBE_TAPER_SD))
        .product()
}

fn eval_map(lattice: &VoxelLattice, f: fn(&[f64; 3]) -> f64) -> Vec<f64> {
    lattice.coords().iter().map(f).collect()
}

/// Slope maps of the three cube groups, `3 x d`: a scaled GP draw, the
/// trigonometric map and the sparse center map.
pub fn make_group_svcs<R: Rng + ?Sized>(lattice: &VoxelLattice, basis: &BasisSystem, rng: &mut R) -> DMatrix<f64> {
    let scale = gp_scale(lattice, basis);
    let gp: Vec<f64> = sample_gp(basis, rng).into_iter().map(|v| v * scale).collect();
    let trig = eval_map(lattice, trig_map);
    let cube = eval_map(lattice, center_cube_map);
    DMatrix::from_fn(3, lattice.d(), |r, v| [&gp, &trig, &cube][r][v])
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Draws labels from the gating model on `(1, z_i)`.
pub fn sample_labels<R: Rng + ?Sized>(gating: &DMatrix<f64>, z: &[f64], rng: &mut R) -> Vec<usize> {
    z.iter()
        .map(|&zi| {
            let p = gating_probs(gating, &[1.0, zi]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        })
        .collect()
}

/// Simulates on the full cube of `config.dims`.
pub fn simulate_cube(config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    simulate_on(&config.lattice()?, config)
}

/// Simulates on any lattice; `config.dims` is ignored.
pub fn simulate_on(lattice: &VoxelLattice, config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let n = config.n;
    let d = lattice.d();
    let k = config.k();

    let mut cov = stream(config.seed, STREAM_COVARIATES);
    let x_dist = Normal::new(0.0, config.x_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let z_dist = Normal::new(0.0, config.z_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let x: Vec<f64> = (0..n).map(|_| x_dist.sample(&mut cov)).collect();
    let z: Vec<f64> = (0..n).map(|_| z_dist.sample(&mut cov)).collect();
    let site_draw: Vec<usize> = (0..n).map(|_| cov.random_range(0..config.n_sites)).collect();
    let gating = config.gating_matrix();
    let labels = sample_labels(&gating, &z, &mut cov);

    let mut fields = stream(config.seed, STREAM_FIELDS);
    let needs_gp = config.intercept == InterceptMap::Gp || config.slopes.contains(&SlopeMap::Gp);
    let gp_basis = if needs_gp {
        Some(simulation_basis(lattice, config.kernel()?, config.gp_degree)?)
    } else {
        None
    };
    let gp_draw = |rng: &mut ChaCha8Rng| {
        let b = gp_basis.as_ref().expect("basis built when a GP map is requested");
        let s = gp_scale(lattice, b);
        sample_gp(b, rng).into_iter().map(|v| v * s).collect::<Vec<f64>>()
    };
    let intercept = match config.intercept {
        InterceptMap::Gp => gp_draw(&mut fields),
        InterceptMap::Zero => vec![0.0; d],
    };
    let slopes: Vec<Vec<f64>> = config
        .slopes
        .iter()
        .map(|s| match s {
            SlopeMap::Gp => gp_draw(&mut fields),
            SlopeMap::Trig => eval_map(lattice, trig_map),
            SlopeMap::CenterCube => eval_map(lattice, center_cube_map),
            SlopeMap::Zero => vec![0.0; d],
        })
        .collect();
    let gamma_all = DMatrix::from_fn(config.n_sites, d, |_, _| config.site_sd * fields.sample::<f64, _>(StandardNormal));
    let eta = DMatrix::from_fn(1, d, |_, _| config.control_sd * fields.sample::<f64, _>(StandardNormal));

    let codes: Vec<String> = site_draw.iter().map(|s| (s + 1).to_string()).collect();
    let (sites, site_codes) = encode_sites(&codes);
    let present: Vec<usize> = site_codes.iter().map(|c| c.parse::<usize>().expect("numeric codes") - 1).collect();
    let gamma = DMatrix::from_fn(present.len(), d, |r, v| gamma_all[(present[r], v)]);
    let alpha: Vec<DMatrix<f64>> = slopes
        .iter()
        .map(|s| DMatrix::from_fn(2, d, |r, v| if r == 0 { intercept[v] } else { s[v] }))
        .collect();

    let mut images = DMatrix::zeros(n, d);
    let rows = parallel::map_range(n, |i| {
        let mut rng = stream(config.seed, STREAM_NOISE + i as u64);
        let a = &alpha[labels[i]];
        let s = site_draw[i];
        (0..d)
            .map(|v| {
                let mu = a[(0, v)] + a[(1, v)] * x[i] + gamma_all[(s, v)] + z[i] * eta[(0, v)];
                mu + config.sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect::<Vec<f64>>()
    });
    for (i, row) in rows.into_iter().enumerate() {
        for (v, val) in row.into_iter().enumerate() {
            images[(i, v)] = val;
        }
    }

    let ds = Dataset::new(
        (1..=n).map(|i| format!("s{i:05}")).collect(),
        images,
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
        vec!["x_1".into()],
        DMatrix::from_fn(n, 1, |i, _| z[i]),
        vec!["z_1".into()],
        sites,
        site_codes,
    )?;
    debug_assert_eq!(k, alpha.len());
    let truth = GroundTruth {
        labels,
        alpha,
        gamma,
        eta,
        gating,
    };
    Ok((ds, truth))
}

/// Noise-free means `μ_i(v)` implied by the truth, `n x d`.
pub fn true_means(ds: &Dataset, truth: &GroundTruth) -> DMatrix<f64> {
    let d = truth.gamma.ncols();
    let site = ds.site_index();
    DMatrix::from_fn(ds.n(), d, |i, v| {
        let a = &truth.alpha[truth.labels[i]];
        let mut mu = truth.gamma[(site[i], v)];
        for j in 0..a.nrows() {
            mu += ds.exposures[(i, j)] * a[(j, v)];
        }
        for r in 0..truth.eta.nrows() {
            mu += ds.controls[(i, r)] * truth.eta[(r, v)];
        }
        mu
    })
}

/// Individual-specific coefficient maps `β_ij(v)` implied by group maps,
/// one `n x d` matrix per exposure.
pub fn individual_betas(labels: &[usize], alpha: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let (p1, d) = alpha[0].shape();
    (0..p1)
        .map(|j| DMatrix::from_fn(labels.len(), d, |i, v| alpha[labels[i]][(j, v)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn map_values() {
        assert_abs_diff_eq!(trig_map(&[0.0, 0.0, 0.0]), 1.0);
        assert_abs_diff_eq!(trig_map(&[0.5, 0.0, 0.0]), 2f64.sin() + 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(trig_map(&[0.5, 0.0, 0.0]), 1.9093, epsilon = 1e-4);
        assert_eq!(center_cube_map(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(center_cube_map(&[0.0, -1.0, 0.3]), 0.0);
        assert!(center_cube_map(&[0.0, 0.0, 0.0]) > 0.99);
    }

    #[test]
    fn gp_zero_scores_and_seeds() {
        let lat = VoxelLattice::cube(6).unwrap();
        let basis = build_basis(&lat, KernelParams::simulation(), 3).unwrap();
        assert!(gp_field(&basis, &vec![0.0; basis.l()]).iter().all(|&v| v == 0.0));
        let a = sample_gp(&basis, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_gp(&basis, &mut ChaCha8Rng::seed_from_u64(1));
        let c = sample_gp(&basis, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gp_center_variance_matches_truncated_kernel() {
        let lat = VoxelLattice::cube(7).unwrap();
        let basis = build_basis(&lat, KernelParams::simulation(), 4).unwrap();
        let c = lat.center_voxel();
        let analytic: f64 = (0..basis.l()).map(|l| basis.eigvals()[l] * basis.psi()[(c, l)].powi(2)).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..2000).map(|_| sample_gp(&basis, &mut rng)[c]).collect();
        let mean = draws.iter().sum::<f64>() / 2000.0;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
        assert!((var / analytic - 1.0).abs() < 0.1, "{var} vs {analytic}");
    }

    #[test]
    fn label_frequencies_at_zero_control() {
        let cfg = SimConfig::default();
        let z = vec![0.0; 100_000];
        let labels = sample_labels(&cfg.gating_matrix(), &z, &mut ChaCha8Rng::seed_from_u64(4));
        for (k, p) in [0.1716, 0.5156, 0.3127].iter().enumerate() {
            let f = labels.iter().filter(|&&g| g == k).count() as f64 / 1e5;
            assert!((f - p).abs() < 0.005, "group {k}: {f}");
        }
    }

    #[test]
    fn simulation_is_reproducible_and_consistent() {
        let cfg = SimConfig::cube(6, 60, 1.0, 7);
        let (ds, truth) = simulate_cube(&cfg).unwrap();
        let (ds2, truth2) = simulate_cube(&cfg).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(truth, truth2);
        assert_eq!(ds.d(), 216);
        assert_eq!(truth.k(), 3);
        assert_eq!(truth.gamma.nrows(), ds.n_sites());
        let other = simulate_cube(&SimConfig { seed: 8, ..cfg.clone() }).unwrap().0;
        assert_ne!(ds.images, other.images);
    }

    #[test]
    fn residual_sd_matches_sigma() {
        let cfg = SimConfig::cube(20, 130, 1.5, 9);
        let (ds, truth) = simulate_cube(&cfg).unwrap();
        let resid = &ds.images - true_means(&ds, &truth);
        let total = resid.len() as f64;
        assert!(total >= 1e6);
        let mean = resid.sum() / total;
        let sd = ((resid.map(|r| (r - mean) * (r - mean)).sum()) / (total - 1.0)).sqrt();
        assert!((sd / 1.5 - 1.0).abs() < 0.02, "{sd}");
    }

    #[test]
    fn gp_fields_have_unit_scale() {
        let lat = VoxelLattice::cube(10).unwrap();
        let basis = simulation_basis(&lat, KernelParams::simulation(), 12).unwrap();
        assert!(basis.degree() <= 12);
        let s = gp_scale(&lat, &basis);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ss = 0.0;
        for _ in 0..200 {
            ss += sample_gp(&basis, &mut rng).iter().map(|v| (v * s).powi(2)).sum::<f64>();
        }
        let mean_var = ss / (200.0 * lat.d() as f64);
        let trace_mean = lat.coords().iter().map(|v| (-0.02 * v.iter().map(|x| x * x).sum::<f64>()).exp()).sum::<f64>() / lat.d() as f64;
        assert!((mean_var / trace_mean - 1.0).abs() < 0.15, "{mean_var}");
    }

    #[test]
    fn config_validation() {
        let cfg = SimConfig {
            sigma: 0.0,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.gating[2][0] = 1.0;
        assert!(cfg.validate().is_err());
        let text = "n = 50\ndims = [5, 5, 5]\nslopes = [\"trig\"]\ngating = [[0.0, 0.0]]\n";
        let cfg: SimConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.k(), 1);
        assert!(cfg.validate().is_ok());
    }
}
