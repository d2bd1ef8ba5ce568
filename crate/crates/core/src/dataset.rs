//! In-memory containers for image outcomes and covariates.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::VoxelLattice;

/// Images and covariates for `n` individuals.
///
/// Rows are individuals. `exposures` carries a leading intercept column of
/// ones; `sites` is a one-hot encoding over the sorted distinct site codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: DMatrix<f64>,
    pub exposures: DMatrix<f64>,
    pub exposure_names: Vec<String>,
    pub controls: DMatrix<f64>,
    pub control_names: Vec<String>,
    pub sites: DMatrix<f64>,
    pub site_codes: Vec<String>,
}

impl Dataset {
    /// Validates shapes and encodings.
    pub fn new(
        ids: Vec<String>,
        images: DMatrix<f64>,
        exposures: DMatrix<f64>,
        exposure_names: Vec<String>,
        controls: DMatrix<f64>,
        control_names: Vec<String>,
        sites: DMatrix<f64>,
        site_codes: Vec<String>,
    ) -> Result<Self> {
        let n = images.nrows();
        for (what, rows) in [
            ("ids", ids.len()),
            ("exposures", exposures.nrows()),
            ("controls", controls.nrows()),
            ("sites", sites.nrows()),
        ] {
            if rows != n {
                return Err(Error::RowCountMismatch(format!(
                    "{what} has {rows} rows, images have {n}"
                )));
            }
        }
        if exposures.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "exposures need at least the intercept column".into(),
            ));
        }
        if exposure_names.len() + 1 != exposures.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} exposure names for {} non-intercept columns",
                exposure_names.len(),
                exposures.ncols() - 1
            )));
        }
        if control_names.len() != controls.ncols() {
            return Err(Error::DimensionMismatch("control names vs columns".into()));
        }
        if site_codes.len() != sites.ncols() {
            return Err(Error::DimensionMismatch("site codes vs columns".into()));
        }
        for i in 0..n {
            if exposures[(i, 0)] != 1.0 {
                return Err(Error::MalformedRecord(format!(
                    "individual {i}: intercept column must be 1"
                )));
            }
            let row = sites.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != sites.ncols() {
                return Err(Error::MalformedRecord(format!(
                    "individual {i}: site row must be one-hot"
                )));
            }
        }
        Ok(Self {
            ids,
            images,
            exposures,
            exposure_names,
            controls,
            control_names,
            sites,
            site_codes,
        })
    }

    pub fn n(&self) -> usize {
        self.images.nrows()
    }

    pub fn d(&self) -> usize {
        self.images.ncols()
    }

    /// Exposure count excluding the intercept.
    pub fn p(&self) -> usize {
        self.exposures.ncols() - 1
    }

    pub fn q(&self) -> usize {
        self.controls.ncols()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.ncols()
    }

    pub fn check_lattice(&self, lattice: &VoxelLattice) -> Result<()> {
        if self.d() != lattice.d() {
            return Err(Error::DimensionMismatch(format!(
                "images have {} columns, lattice has {} voxels",
                self.d(),
                lattice.d()
            )));
        }
        Ok(())
    }

    /// Site column index per individual.
    pub fn site_index(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                self.sites
                    .row(i)
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("validated one-hot")
            })
            .collect()
    }

    /// Gating features: controls with a leading column of ones.
    pub fn gating_features(&self) -> DMatrix<f64> {
        let n = self.n();
        let q = self.q();
        DMatrix::from_fn(n, q + 1, |i, c| if c == 0 { 1.0 } else { self.controls[(i, c - 1)] })
    }

    /// Subset of individuals, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)]);
        Dataset {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            images: pick(&self.images),
            exposures: pick(&self.exposures),
            exposure_names: self.exposure_names.clone(),
            controls: pick(&self.controls),
            control_names: self.control_names.clone(),
            sites: pick(&self.sites),
            site_codes: self.site_codes.clone(),
        }
    }
}

/// One-hot encodes categorical site codes over their sorted distinct values.
///
/// Codes that all parse as integers sort numerically, otherwise
/// lexicographically.
pub fn encode_sites(codes: &[String]) -> (DMatrix<f64>, Vec<String>) {
    let mut distinct: Vec<String> = codes.to_vec();
    let numeric: Option<Vec<i64>> = distinct.iter().map(|s| s.trim().parse().ok()).collect();
    if numeric.is_some() {
        distinct.sort_by_key(|s| s.trim().parse::<i64>().unwrap());
    } else {
        distinct.sort();
    }
    distinct.dedup();
    let mut m = DMatrix::zeros(codes.len(), distinct.len());
    for (i, c) in codes.iter().enumerate() {
        let s = distinct.iter().position(|d| d == c).unwrap();
        m[(i, s)] = 1.0;
    }
    (m, distinct)
}

/// Simulation truth. Labels are zero-based group indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    /// Per group, a `(p+1) x d` matrix of coefficient maps.
    pub alpha: Vec<DMatrix<f64>>,
    /// `S x d`
    pub gamma: DMatrix<f64>,
    /// `q x d`
    pub eta: DMatrix<f64>,
    /// `K x (q+1)`, last row zero.
    pub gating: DMatrix<f64>,
}

impl GroundTruth {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}
