//! Latent-subgroup image-on-scalar regression.
//!
//! Images are reduced onto an orthonormal spatial basis built from kernel
//! eigenfunctions; a mixture of multivariate regressions with a
//! multinomial-logit gating model is then fit by stochastic EM, subgroups
//! are chosen by BIC, and group-specific coefficient maps are tested
//! voxelwise.

pub mod baselines;
pub mod basis;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod io;
pub mod lattice;
pub mod linmodel;
pub mod metrics;
pub mod parallel;
pub mod projection;
pub mod selection;
pub mod sem;
pub mod simgen;
pub mod study;

pub use basis::{build_basis, BasisSystem, KernelParams};
pub use dataset::{Dataset, GroundTruth};
pub use error::{Error, Result};
pub use lattice::{MaskSpec, VoxelLattice};
pub use sem::{fit_sem, FitResult, ModelParams, SemConfig};
