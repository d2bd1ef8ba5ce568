//! Voxel space <-> basis-coefficient space.

use nalgebra::DMatrix;

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::parallel;

const ROW_BLOCK: usize = 64;

/// Projected outcomes `ytilde = images * Psi` (`n x L`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefImage {
    pub ytilde: DMatrix<f64>,
}

fn blocked_product(left: &DMatrix<f64>, right: &DMatrix<f64>, transpose_right: bool) -> DMatrix<f64> {
    let n = left.nrows();
    let out_cols = if transpose_right { right.nrows() } else { right.ncols() };
    let blocks = n.div_ceil(ROW_BLOCK);
    let parts = parallel::map_range(blocks, |b| {
        let start = b * ROW_BLOCK;
        let len = ROW_BLOCK.min(n - start);
        let rows = left.rows(start, len);
        if transpose_right {
            rows * right.transpose()
        } else {
            rows * right
        }
    });
    let mut out = DMatrix::zeros(n, out_cols);
    for (b, part) in parts.into_iter().enumerate() {
        out.rows_mut(b * ROW_BLOCK, part.nrows()).copy_from(&part);
    }
    out
}

pub fn project(images: &DMatrix<f64>, basis: &BasisSystem) -> Result<CoefImage> {
    if images.ncols() != basis.d() {
        return Err(Error::DimensionMismatch(format!(
            "images have {} columns, basis has {} voxels",
            images.ncols(),
            basis.d()
        )));
    }
    Ok(CoefImage {
        ytilde: blocked_product(images, basis.psi(), false),
    })
}

/// Maps coefficient rows back to voxel maps: `coefs * Psiᵀ`.
pub fn backproject(coefs: &DMatrix<f64>, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    if coefs.ncols() != basis.l() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have {} columns, basis has L = {}",
            coefs.ncols(),
            basis.l()
        )));
    }
    Ok(blocked_product(coefs, basis.psi(), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, KernelParams};
    use crate::lattice::VoxelLattice;
    use approx::assert_abs_diff_eq;

    fn basis() -> BasisSystem {
        build_basis(&VoxelLattice::cube(6).unwrap(), KernelParams::simulation(), 3).unwrap()
    }

    #[test]
    fn identity_basis_is_transparent() {
        let b = BasisSystem::from_parts(DMatrix::identity(5, 5), vec![1.0; 5], 0, KernelParams::simulation()).unwrap();
        let y = DMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        assert_eq!(project(&y, &b).unwrap().ytilde, y);
    }

    #[test]
    fn basis_column_projects_to_unit_vector() {
        let b = basis();
        let col = DMatrix::from_fn(1, b.d(), |_, v| b.psi()[(v, 2)]);
        let t = project(&col, &b).unwrap().ytilde;
        for l in 0..b.l() {
            assert_abs_diff_eq!(t[(0, l)], if l == 2 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_contracts_norms_and_is_idempotent() {
        let b = basis();
        let y = DMatrix::from_fn(130, b.d(), |i, j| ((i * 31 + j * 7) as f64).sin());
        let t = project(&y, &b).unwrap().ytilde;
        for i in 0..y.nrows() {
            assert!(t.row(i).norm() <= y.row(i).norm() + 1e-12);
        }
        let back = backproject(&t, &b).unwrap();
        let again = project(&back, &b).unwrap().ytilde;
        assert!((again - &t).amax() < 1e-10);
    }

    #[test]
    fn backprojection_basics() {
        let b = basis();
        let z = backproject(&DMatrix::zeros(2, b.l()), &b).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let mut e = DMatrix::zeros(1, b.l());
        e[(0, 4)] = 1.0;
        let m = backproject(&e, &b).unwrap();
        assert!((m.row(0).transpose() - b.psi().column(4)).amax() < 1e-15);
        assert!(backproject(&DMatrix::zeros(1, b.l() + 1), &b).is_err());
        assert!(project(&DMatrix::zeros(1, b.d() - 1), &b).is_err());
    }
}
