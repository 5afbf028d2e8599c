//! Invariance-guided regularization for multi-environment linear regression.
//!
//! The crate has two halves. The estimation side turns per-environment data
//! into moments ([`moments`]), scores every small covariate subset by how much
//! its least-squares fit varies across environments ([`variation`]) and solves
//! the resulting weighted-lasso problem ([`solver`], [`pipeline`]). The lab
//! side ([`lab`]) works with exact arithmetic: it enumerates invariant sets,
//! compiles 3-CNF formulas into invariance instances and checks the
//! construction by brute force.

pub mod error;
pub mod io;
pub mod lab;
pub mod linalg;
pub mod moments;
pub mod pipeline;
pub mod scalar;
pub mod scm;
pub mod solver;
pub mod subset;
mod surd;
pub mod variation;

pub use error::{IgrError, Result};
pub use moments::{
    moments_from_samples, pooled_risk, restricted_ls, ColumnTransform, EnvMoments, Environment, MomentOptions,
    MultiEnvDataset, RestrictedCoef,
};
pub use scalar::{Rational, Scalar, Surd};
pub use scm::{make_example, population_moments, random_scm, sample, ExampleName, LinearScm, ScmOracle, ScmRegime};
pub use solver::{
    kkt_residual, objective, solution_path, solve, uncertainty_membership, IgrFit, PenalizedProblem, SolutionPath,
    SolverOptions,
};
pub use subset::IndexSet;
pub use variation::{
    gamma_star, prediction_variation, prediction_variation_residual, weight_table, VariationCache, WeightConvention,
    WeightTable,
};
