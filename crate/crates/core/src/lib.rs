//! Local polynomial M-regression: estimators, kernel moment algebra, the
//! Bahadur decomposition of the local estimator and marginal integration
//! for additive models.

// `!(x < t)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod additive;
pub mod bahadur;
pub mod dgp;
pub mod error;
pub mod experiments;
pub mod kernelmoments;
pub mod localfit;
pub mod loss;
pub mod noise;
pub mod polybasis;
pub mod quadrature;
pub mod serde_nan;
pub mod stats;

pub use additive::{AdditiveEstimate, AdditiveFitConfig};
pub use bahadur::{BahadurContext, BahadurDecomposition, RateReport, SnpMode};
pub use dgp::{DgpKind, DgpSpec, SeriesSample};
pub use error::{Error, Result};
pub use experiments::{run, ExperimentReport, ExperimentSpec, Study};
pub use kernelmoments::{Kernel, KernelFamily, LocalDensityModel, MomentDomain, MomentMatrix, MomentTables};
pub use localfit::{fit_grid, fit_point, objective_value, Dataset, FitConfig, FitResult, GridFit, SampleKind, SolverSettings};
pub use loss::{analytic_g, analytic_sigma2, LossModel, Smoothness};
pub use noise::{ErrorLaw, ErrorModel};
pub use polybasis::{BasisLayout, DiagonalScaling, MultiIndex};
