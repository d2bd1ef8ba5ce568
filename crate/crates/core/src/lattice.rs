//! Voxel lattice: a 3-D grid, an inclusion mask, and normalized coordinates.
//!
//! Grid cells are ordered x-fastest: `cell = ix + nx * (iy + ny * iz)`.
//! Masked voxels keep that order. Each axis is mapped affinely onto
//! `[-1, 1]`, symmetric about the grid center; an axis of length one maps
//! to `0`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    Full,
    /// One flag per grid cell, x-fastest.
    Explicit(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLattice {
    dims: [usize; 3],
    mask: Vec<bool>,
    coords: Vec<[f64; 3]>,
    cells: Vec<usize>,
}

fn axis_coord(i: usize, m: usize) -> f64 {
    if m == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (m - 1) as f64
    }
}

impl VoxelLattice {
    pub fn new(dims: [usize; 3], mask_spec: MaskSpec) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidLattice(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mask = match mask_spec {
            MaskSpec::Full => vec![true; ncells],
            MaskSpec::Explicit(m) => {
                if m.len() != ncells {
                    return Err(Error::InvalidLattice(format!(
                        "mask has {} cells, dims imply {ncells}",
                        m.len()
                    )));
                }
                m
            }
        };
        let mut coords = Vec::new();
        let mut cells = Vec::new();
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let cell = ix + dims[0] * (iy + dims[1] * iz);
                    if mask[cell] {
                        cells.push(cell);
                        coords.push([
                            axis_coord(ix, dims[0]),
                            axis_coord(iy, dims[1]),
                            axis_coord(iz, dims[2]),
                        ]);
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::EmptyLattice);
        }
        Ok(Self {
            dims,
            mask,
            coords,
            cells,
        })
    }

    /// Full cube with side `m` on every axis.
    pub fn cube(m: usize) -> Result<Self> {
        Self::new([m, m, m], MaskSpec::Full)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_cells(&self) -> usize {
        self.mask.len()
    }

    /// Number of masked voxels.
    pub fn d(&self) -> usize {
        self.cells.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Grid cell index of each masked voxel.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Masked voxel closest to the origin (first one on ties).
    pub fn center_voxel(&self) -> usize {
        let norm2 = |c: &[f64; 3]| c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
        let mut best = 0;
        for (m, c) in self.coords.iter().enumerate() {
            if norm2(c) < norm2(&self.coords[best]) {
                best = m;
            }
        }
        best
    }

    /// Scatters a masked-voxel vector into a full grid, NaN outside the mask.
    pub fn scatter(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "map has {} values, lattice has {} voxels",
                values.len(),
                self.d()
            )));
        }
        let mut grid = vec![f64::NAN; self.n_cells()];
        for (&cell, &v) in self.cells.iter().zip(values) {
            grid[cell] = v;
        }
        Ok(grid)
    }

    /// Inverse of [`scatter`](Self::scatter).
    pub fn gather(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.len() != self.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} cells, lattice has {}",
                grid.len(),
                self.n_cells()
            )));
        }
        Ok(self.cells.iter().map(|&c| grid[c]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_coords_are_symmetric() {
        let lat = VoxelLattice::new([3, 1, 1], MaskSpec::Full).unwrap();
        let xs: Vec<f64> = lat.coords().iter().map(|c| c[0]).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
        assert!(lat.coords().iter().all(|c| c[1] == 0.0 && c[2] == 0.0));
    }

    #[test]
    fn large_cube_size() {
        assert_eq!(VoxelLattice::cube(25).unwrap().d(), 15625);
    }

    #[test]
    fn partial_mask_counts_true_cells() {
        let mut m = vec![false; 8];
        m[0] = true;
        m[3] = true;
        m[7] = true;
        let lat = VoxelLattice::new([2, 2, 2], MaskSpec::Explicit(m)).unwrap();
        assert_eq!(lat.d(), 3);
        assert_eq!(lat.cells(), &[0, 3, 7]);
        assert_eq!(lat.coords()[2], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let err = VoxelLattice::new([2, 2, 2], MaskSpec::Explicit(vec![false; 8])).unwrap_err();
        assert_eq!(err.to_string(), "empty lattice");
    }

    #[test]
    fn mask_length_must_match() {
        assert!(VoxelLattice::new([2, 2, 2], MaskSpec::Explicit(vec![true; 7])).is_err());
        assert!(VoxelLattice::new([0, 2, 2], MaskSpec::Full).is_err());
    }

    #[test]
    fn coords_bounded_and_deterministic() {
        let a = VoxelLattice::new([4, 5, 1], MaskSpec::Full).unwrap();
        let b = VoxelLattice::new([4, 5, 1], MaskSpec::Full).unwrap();
        assert_eq!(a, b);
        for c in a.coords() {
            assert!(c.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        // x-fastest ordering
        assert_eq!(a.coords()[1][0], -1.0 + 2.0 / 3.0);
        assert_eq!(a.coords()[4][1], -0.5);
    }

    #[test]
    fn scatter_gather_round_trip() {
        let mut m = vec![true; 8];
        m[2] = false;
        let lat = VoxelLattice::new([2, 2, 2], MaskSpec::Explicit(m)).unwrap();
        let vals: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let grid = lat.scatter(&vals).unwrap();
        assert!(grid[2].is_nan());
        assert_eq!(lat.gather(&grid).unwrap(), vals);
        assert!(lat.scatter(&vals[..6]).is_err());
    }

    #[test]
    fn center_voxel_is_origin_for_odd_cube() {
        let lat = VoxelLattice::cube(5).unwrap();
        assert_eq!(lat.coords()[lat.center_voxel()], [0.0, 0.0, 0.0]);
    }
}
