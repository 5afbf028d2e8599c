//! Fixtures shared by the benchmarks.

use igr_core::lab::{reduce_3sat, CnfFormula, LisInstance};
use igr_core::{moments_from_samples, random_scm, sample, EnvMoments, MomentOptions, ScmRegime};

/// Sample moments of a random SCM with `d` covariates and three environments.
pub fn sample_moments(d: usize, n: usize, seed: u64) -> EnvMoments<f64> {
    let scm = random_scm(d, ScmRegime::General, 3, seed).expect("valid dimension");
    let data = sample(&scm, n, seed).expect("positive sample size");
    moments_from_samples(&data, &MomentOptions::default()).expect("full-rank samples")
}

pub fn reduced(k: usize, seed: u64) -> LisInstance {
    reduce_3sat(&CnfFormula::random(k, 3 * k, seed).expect("k ≥ 1"))
}
