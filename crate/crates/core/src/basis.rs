//! Orthonormal spatial basis from the eigenfunctions of the modified
//! squared-exponential kernel
//! `k(v1, v2) = exp(-a(|v1|^2 + |v2|^2) - b|v1 - v2|^2)`.
//!
//! In one dimension, with `c = sqrt(a^2 + 2ab)`, `A = a + b + c` and
//! `B = b / A`, degree `k` has eigenvalue `sqrt(2a/A) B^k` and eigenfunction
//! `exp(-(c - a) x^2) H_k(sqrt(2c) x)`. Three-dimensional terms are tensor
//! products with total degree at most `h`. The terms are evaluated on the
//! lattice and orthonormalized by a thin SVD; normalization constants of the
//! analytic functions drop out there, so Hermite polynomials are evaluated
//! in their scaled form `H_k / sqrt(2^k k!)`, which keeps the columns
//! comparably sized.

use std::path::Path;

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};
use crate::io::MatrixBundle;
use crate::lattice::{MaskSpec, VoxelLattice};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub a: f64,
    pub b: f64,
}

impl KernelParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel parameters must be positive, got a = {a}, b = {b}"
            )));
        }
        Ok(Self { a, b })
    }

    /// Decay 0.01, smoothness 2: the kernel of the cube simulation.
    pub fn simulation() -> Self {
        Self { a: 0.01, b: 2.0 }
    }
}

/// Evaluates the modified squared-exponential kernel.
pub fn kernel_eval(v1: &[f64; 3], v2: &[f64; 3], params: &KernelParams) -> f64 {
    let sq = |v: &[f64; 3]| v.iter().map(|x| x * x).sum::<f64>();
    let dist2: f64 = v1.iter().zip(v2).map(|(x, y)| (x - y) * (x - y)).sum();
    (-params.a * (sq(v1) + sq(v2)) - params.b * dist2).exp()
}

/// Number of 3-D tensor-product terms with total degree at most `h`.
pub fn basis_size(h: usize) -> usize {
    (h + 1) * (h + 2) * (h + 3) / 6
}

/// Closed-form one-dimensional eigen-system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem1d {
    pub params: KernelParams,
    pub c: f64,
    pub big_a: f64,
    pub ratio: f64,
}

impl EigenSystem1d {
    pub fn new(params: KernelParams) -> Self {
        let KernelParams { a, b } = params;
        let c = (a * a + 2.0 * a * b).sqrt();
        let big_a = a + b + c;
        Self {
            params,
            c,
            big_a,
            ratio: b / big_a,
        }
    }

    pub fn eigenvalue(&self, k: usize) -> f64 {
        (2.0 * self.params.a / self.big_a).sqrt() * self.ratio.powi(k as i32)
    }

    /// Eigenfunctions of degree `0..=max_degree` at `x`, each scaled by
    /// `1 / sqrt(2^k k!)` relative to the physicists' Hermite form.
    pub fn eval_all(&self, x: f64, max_degree: usize) -> Vec<f64> {
        let envelope = (-(self.c - self.params.a) * x * x).exp();
        let t = (2.0 * self.c).sqrt() * x;
        scaled_hermite(t, max_degree)
            .into_iter()
            .map(|h| envelope * h)
            .collect()
    }
}

/// `H_k(t) / sqrt(2^k k!)` for `k = 0..=max_degree` by three-term recurrence.
pub fn scaled_hermite(t: f64, max_degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_degree + 1);
    out.push(1.0);
    if max_degree >= 1 {
        out.push(std::f64::consts::SQRT_2 * t);
    }
    for k in 1..max_degree {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * t * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
        out.push(next);
    }
    out
}

/// Degree triples ordered by ascending total degree, lexicographic within.
pub fn degree_terms(h: usize) -> Vec<[usize; 3]> {
    let mut terms = Vec::with_capacity(basis_size(h));
    for n in 0..=h {
        for k1 in 0..=n {
            for k2 in 0..=(n - k1) {
                terms.push([k1, k2, n - k1 - k2]);
            }
        }
    }
    terms
}

/// `L` orthonormal columns on the lattice and the analytic eigenvalues of
/// the terms they were built from (tensor order).
#[derive(Debug, Clone)]
pub struct BasisSystem {
    psi: DMatrix<f64>,
    eigvals: Vec<f64>,
    degree: usize,
    params: KernelParams,
}

impl BasisSystem {
    /// Wraps an externally supplied orthonormal matrix.
    pub fn from_parts(psi: DMatrix<f64>, eigvals: Vec<f64>, degree: usize, params: KernelParams) -> Result<Self> {
        if eigvals.len() != psi.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} eigenvalues for {} columns",
                eigvals.len(),
                psi.ncols()
            )));
        }
        let err = orthonormality_error(&psi);
        if err > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self {
            psi,
            eigvals,
            degree,
            params,
        })
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn l(&self) -> usize {
        self.psi.ncols()
    }

    pub fn d(&self) -> usize {
        self.psi.nrows()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn save(&self, lattice: &VoxelLattice, path: &Path) -> Result<()> {
        let mut b = MatrixBundle::new();
        b.set_meta("kind", "basis");
        b.set_meta("a", self.params.a);
        b.set_meta("b", self.params.b);
        b.set_meta("h", self.degree as i64);
        b.set_meta(
            "dims",
            toml::Value::Array(lattice.dims().iter().map(|&m| toml::Value::Integer(m as i64)).collect()),
        );
        b.push("psi", self.psi.clone());
        b.push("eigvals", DMatrix::from_row_slice(1, self.eigvals.len(), &self.eigvals));
        let mask: Vec<f64> = lattice.mask().iter().map(|&m| m as u8 as f64).collect();
        b.push("mask", DMatrix::from_row_slice(1, mask.len(), &mask));
        b.write(path)
    }

    /// Loads a basis bundle with the lattice it was built on.
    pub fn load(path: &Path) -> Result<(Self, VoxelLattice)> {
        let b = MatrixBundle::read(path)?;
        let dims_val = b
            .meta
            .get("dims")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::MalformedRecord("basis bundle lacks dims".into()))?;
        let dims: Vec<usize> = dims_val
            .iter()
            .map(|v| v.as_integer().map(|i| i as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::MalformedRecord("basis dims must be integers".into()))?;
        if dims.len() != 3 {
            return Err(Error::MalformedRecord("basis dims must have 3 entries".into()));
        }
        let mask: Vec<bool> = b.get("mask")?.iter().map(|&v| v != 0.0).collect();
        let lattice = VoxelLattice::new([dims[0], dims[1], dims[2]], MaskSpec::Explicit(mask))?;
        let params = KernelParams::new(b.meta_float("a")?, b.meta_float("b")?)?;
        let psi = b.get("psi")?.clone();
        if psi.nrows() != lattice.d() {
            return Err(Error::DimensionMismatch("basis rows vs lattice voxels".into()));
        }
        let eigvals = b.get("eigvals")?.iter().copied().collect();
        let basis = Self::from_parts(psi, eigvals, b.meta_int("h")? as usize, params)?;
        Ok((basis, lattice))
    }
}

/// `max |PsiᵀPsi - I|`.
pub fn orthonormality_error(psi: &DMatrix<f64>) -> f64 {
    let g = psi.transpose() * psi;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Evaluates the tensor-product eigenfunctions on the lattice (`d x L`).
pub fn eigenfunction_matrix(lattice: &VoxelLattice, params: KernelParams, h: usize) -> (DMatrix<f64>, Vec<f64>) {
    let sys = EigenSystem1d::new(params);
    let terms = degree_terms(h);
    let d = lattice.d();
    let tables: Vec<[Vec<f64>; 3]> = parallel::map_range(d, |m| {
        let c = lattice.coords()[m];
        [sys.eval_all(c[0], h), sys.eval_all(c[1], h), sys.eval_all(c[2], h)]
    });
    let mut psi_tilde = DMatrix::zeros(d, terms.len());
    parallel::for_each_chunk_mut(psi_tilde.as_mut_slice(), d, |l, col| {
        let [k1, k2, k3] = terms[l];
        for (m, out) in col.iter_mut().enumerate() {
            let t = &tables[m];
            *out = t[0][k1] * t[1][k2] * t[2][k3];
        }
    });
    let eigvals = terms
        .iter()
        .map(|&[k1, k2, k3]| sys.eigenvalue(k1) * sys.eigenvalue(k2) * sys.eigenvalue(k3))
        .collect();
    (psi_tilde, eigvals)
}

/// Left singular vectors of a tall matrix, via Householder QR followed by an
/// SVD of the triangular factor. Returns columns sorted by descending
/// singular value along with the singular values.
pub fn thin_left_singular(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    let svd = SVD::new(r, true, false);
    let u_r = svd.u.expect("requested U");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let u_sorted = DMatrix::from_fn(u_r.nrows(), order.len(), |i, j| u_r[(i, order[j])]);
    (q * u_sorted, order.iter().map(|&i| sv[i]).collect())
}

/// Builds the orthonormal basis with all terms of total degree `<= h`.
///
/// Fails when `L > d`, or when the evaluated terms are numerically rank
/// deficient: smallest singular value below `max(d, L) * eps` times the
/// largest.
pub fn build_basis(lattice: &VoxelLattice, params: KernelParams, h: usize) -> Result<BasisSystem> {
    let l = basis_size(h);
    let d = lattice.d();
    if l > d {
        return Err(Error::BasisExceedsLattice { basis: l, voxels: d });
    }
    let (psi_tilde, eigvals) = eigenfunction_matrix(lattice, params, h);
    let (mut psi, sv) = thin_left_singular(psi_tilde);
    let ratio = sv[sv.len() - 1] / sv[0];
    let tol = d.max(l) as f64 * f64::EPSILON;
    if !(ratio >= tol) {
        return Err(Error::DegenerateBasis { ratio });
    }
    for mut col in psi.column_iter_mut() {
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(BasisSystem {
        psi,
        eigvals,
        degree: h,
        params,
    })
}

fn degree_sum(ratio: f64, h: usize) -> f64 {
    (0..=h)
        .map(|n| ((n + 1) * (n + 2) / 2) as f64 * ratio.powi(n as i32))
        .sum()
}

/// Share of the reference eigenvalue mass captured by degrees `<= h`.
pub fn variance_contribution(params: KernelParams, h: usize, h_ref: usize) -> f64 {
    let ratio = EigenSystem1d::new(params).ratio;
    degree_sum(ratio, h) / degree_sum(ratio, h_ref)
}

/// Smallest `h` whose variance contribution reaches `r0`.
pub fn select_h(params: KernelParams, h_ref: usize, r0: f64) -> usize {
    (0..=h_ref)
        .find(|&h| variance_contribution(params, h, h_ref) >= r0)
        .unwrap_or(h_ref)
}
