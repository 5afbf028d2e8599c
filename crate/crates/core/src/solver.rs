//! Weighted-lasso solver for the invariance-guided objective
//!
//! `½βᵀΣβ − βᵀu + ½E[Y²] + Σ_j (γ·sqrt(w_j) + λ)|β_j|`
//!
//! on pooled moments, by cyclic coordinate descent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::linalg::{eigen_range, is_positive_definite, is_symmetric};
use crate::moments::EnvMoments;
use crate::scalar::Scalar;
use crate::subset::IndexSet;
use crate::variation::{WeightConvention, WeightTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Stop when no coordinate moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Largest KKT residual accepted as optimal.
    pub kkt_tol: f64,
    /// Coefficients at or below this magnitude are outside the support.
    pub support_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_sweeps: 100_000,
            kkt_tol: 1e-6,
            support_threshold: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgrFit {
    pub beta: Vec<f64>,
    pub support: IndexSet,
    pub k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub convention: WeightConvention,
}

impl IgrFit {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// Pooled quadratic plus per-coordinate penalty factors.
#[derive(Clone, Debug)]
pub struct PenalizedProblem {
    sigma: DMatrix<f64>,
    u: DVector<f64>,
    mean_sq_y: f64,
    factors: Vec<f64>,
    k: usize,
    convention: WeightConvention,
    positive_definite: bool,
}

impl PenalizedProblem {
    pub fn new<T: Scalar>(m: &EnvMoments<f64>, w: &WeightTable<T>) -> Result<Self> {
        if w.d() != m.d() {
            return Err(IgrError::DimensionMismatch(format!(
                "weights for {} variables, moments for {}",
                w.d(),
                m.d()
            )));
        }
        let mut p = PenalizedProblem::from_parts(
            m.pooled_sigma().clone(),
            m.pooled_u().clone(),
            m.mean_sq_y().unwrap_or(0.0),
            w.penalty_factors(),
        )?;
        p.k = w.k();
        p.convention = w.convention();
        Ok(p)
    }

    /// `factors[j]` multiplies `γ|β_j|`.
    pub fn from_parts(sigma: DMatrix<f64>, u: DVector<f64>, mean_sq_y: f64, factors: Vec<f64>) -> Result<Self> {
        let d = u.len();
        if sigma.shape() != (d, d) || factors.len() != d {
            return Err(IgrError::DimensionMismatch(format!(
                "Σ is {}×{}, u has {d} entries, {} penalty factors",
                sigma.nrows(),
                sigma.ncols(),
                factors.len()
            )));
        }
        if sigma.iter().chain(u.iter()).chain(&factors).any(|v| !v.is_finite()) || !mean_sq_y.is_finite() {
            return Err(IgrError::NonFinite("penalized problem".into()));
        }
        if factors.iter().any(|&f| f < 0.0) {
            return Err(IgrError::InvalidInput("penalty factors must be nonnegative".into()));
        }
        if !is_symmetric(&sigma, 1e-9) {
            return Err(IgrError::InvalidInput("Σ is not symmetric".into()));
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        let (lo, _) = eigen_range(&sigma);
        if lo < -1e-10 * scale {
            return Err(IgrError::NotPositiveDefinite(format!(
                "Σ is indefinite (smallest eigenvalue {lo:e})"
            )));
        }
        if (0..d).any(|j| sigma[(j, j)] <= 0.0) {
            return Err(IgrError::NotPositiveDefinite("Σ has a nonpositive diagonal entry".into()));
        }
        let positive_definite = is_positive_definite(&sigma) && lo > 1e-12 * scale;
        Ok(PenalizedProblem {
            sigma,
            u,
            mean_sq_y,
            factors,
            k: 1,
            convention: WeightConvention::Squared,
            positive_definite,
        })
    }

    pub fn d(&self) -> usize {
        self.u.len()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    fn thresholds(&self, gamma: f64, lambda: f64) -> Vec<f64> {
        self.factors.iter().map(|f| gamma * f + lambda).collect()
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.sigma * beta - &self.u
    }

    pub fn objective(&self, beta: &DVector<f64>, gamma: f64, lambda: f64) -> f64 {
        let quad = 0.5 * beta.dot(&(&self.sigma * beta)) - beta.dot(&self.u) + 0.5 * self.mean_sq_y;
        let pen: f64 = self
            .thresholds(gamma, lambda)
            .iter()
            .zip(beta.iter())
            .map(|(p, b)| p * b.abs())
            .sum();
        quad + pen
    }

    pub fn kkt_residual(&self, beta: &DVector<f64>, gamma: f64, lambda: f64) -> f64 {
        let g = self.gradient(beta);
        self.thresholds(gamma, lambda)
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                if beta[j] != 0.0 {
                    (g[j] + p * beta[j].signum()).abs()
                } else {
                    (g[j].abs() - p).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// `γ·sqrt(w_j) − |(Σβ − u)_j|`; all nonnegative iff β lies in the
    /// uncertainty set at level γ.
    pub fn uncertainty_slacks(&self, beta: &DVector<f64>, gamma: f64) -> Vec<f64> {
        let g = self.gradient(beta);
        self.factors
            .iter()
            .zip(g.iter())
            .map(|(f, gj)| gamma * f - gj.abs())
            .collect()
    }

    pub fn solve(&self, gamma: f64, lambda: f64, opts: &SolverOptions) -> Result<IgrFit> {
        self.solve_from(gamma, lambda, opts, None)
    }

    pub fn solve_from(
        &self,
        gamma: f64,
        lambda: f64,
        opts: &SolverOptions,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<IgrFit> {
        if !(gamma >= 0.0 && gamma.is_finite() && lambda >= 0.0 && lambda.is_finite()) {
            return Err(IgrError::InvalidInput(format!(
                "penalty levels must be finite and nonnegative (γ = {gamma}, λ = {lambda})"
            )));
        }
        if !self.positive_definite && lambda == 0.0 {
            return Err(IgrError::NotPositiveDefinite(
                "pooled Σ is singular; a positive λ is required".into(),
            ));
        }
        let d = self.d();
        let p = self.thresholds(gamma, lambda);
        let mut beta = match warm_start {
            Some(b) if b.len() == d => b.clone(),
            Some(b) => {
                return Err(IgrError::DimensionMismatch(format!(
                    "warm start has {} entries, expected {d}",
                    b.len()
                )))
            }
            None => DVector::zeros(d),
        };
        let mut grad = self.gradient(&beta);
        let all: Vec<usize> = (0..d).collect();
        let mut sweeps = 0;
        let mut last_change = f64::INFINITY;
        let mut converged = false;
        while sweeps < opts.max_sweeps {
            // full pass, then iterate on the active set until it settles
            last_change = self.sweep(&all, &p, &mut beta, &mut grad);
            sweeps += 1;
            if last_change < opts.tol {
                converged = true;
                break;
            }
            let active: Vec<usize> = (0..d).filter(|&j| beta[j] != 0.0).collect();
            while sweeps < opts.max_sweeps {
                let change = self.sweep(&active, &p, &mut beta, &mut grad);
                sweeps += 1;
                if change < opts.tol {
                    break;
                }
            }
        }
        let mut best = beta;
        let mut best_kkt = self.kkt_residual(&best, gamma, lambda);
        if let Some(polished) = self.polish(&best, &p) {
            let kkt = self.kkt_residual(&polished, gamma, lambda);
            if kkt <= best_kkt {
                best = polished;
                best_kkt = kkt;
            }
        }
        let fit = IgrFit {
            support: IndexSet::new((0..d).filter(|&j| best[j].abs() > opts.support_threshold)),
            objective: self.objective(&best, gamma, lambda),
            beta: best.iter().copied().collect(),
            k: self.k,
            gamma,
            lambda,
            kkt_residual: best_kkt,
            sweeps,
            converged: converged && best_kkt <= opts.kkt_tol,
            convention: self.convention,
        };
        if fit.converged {
            Ok(fit)
        } else {
            Err(IgrError::NotConverged {
                sweeps,
                last_change,
                fit: Box::new(fit),
            })
        }
    }

    fn sweep(&self, coords: &[usize], p: &[f64], beta: &mut DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let mut max_change = 0.0f64;
        for &j in coords {
            let sjj = self.sigma[(j, j)];
            let old = beta[j];
            let z = sjj * old - grad[j];
            let new = soft_threshold(z, p[j]) / sjj;
            if new != old {
                let delta = new - old;
                beta[j] = new;
                grad.axpy(delta, &self.sigma.column(j), 1.0);
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Re-solves the stationarity equations on the current support with
    /// fixed signs; `None` if the signs are not reproduced.
    fn polish(&self, beta: &DVector<f64>, p: &[f64]) -> Option<DVector<f64>> {
        let active: Vec<usize> = (0..self.d()).filter(|&j| beta[j] != 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let s = active.len();
        let sub = DMatrix::from_fn(s, s, |a, b| self.sigma[(active[a], active[b])]);
        let rhs = DVector::from_fn(s, |a, _| {
            let j = active[a];
            self.u[j] - p[j] * beta[j].signum()
        });
        let x = sub.cholesky()?.solve(&rhs);
        let mut out = DVector::zeros(self.d());
        for (a, &j) in active.iter().enumerate() {
            if x[a] == 0.0 || x[a].signum() != beta[j].signum() {
                return None;
            }
            out[j] = x[a];
        }
        Some(out)
    }

    /// Solves along an ascending γ grid, warm-starting from the largest γ.
    pub fn path(&self, gammas: &[f64], lambda: f64, opts: &SolverOptions) -> Result<SolutionPath> {
        if gammas.is_empty() {
            return Err(IgrError::InvalidInput("empty γ grid".into()));
        }
        if gammas.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(IgrError::InvalidInput("γ grid must be sorted ascending".into()));
        }
        let mut fits: Vec<IgrFit> = Vec::with_capacity(gammas.len());
        let mut warm: Option<DVector<f64>> = None;
        for &g in gammas.iter().rev() {
            let fit = self.solve_from(g, lambda, opts, warm.as_ref())?;
            warm = Some(fit.beta_vector());
            fits.push(fit);
        }
        fits.reverse();
        Ok(SolutionPath::from_fits(gammas.to_vec(), fits))
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionPath {
    pub gammas: Vec<f64>,
    pub fits: Vec<IgrFit>,
    /// Support at the largest γ of the grid.
    pub limit_support: IndexSet,
    /// Smallest grid γ from which the support equals `limit_support`.
    pub limit_gamma: f64,
    /// Per coordinate, the smallest grid γ from which the coefficient stays
    /// zero; `None` if it is nonzero at the largest γ.
    pub exit_gamma: Vec<Option<f64>>,
}

impl SolutionPath {
    fn from_fits(gammas: Vec<f64>, fits: Vec<IgrFit>) -> Self {
        let last = fits.last().expect("nonempty path");
        let limit_support = last.support.clone();
        let d = last.beta.len();
        let mut limit_gamma = last.gamma;
        for f in fits.iter().rev() {
            if f.support != limit_support {
                break;
            }
            limit_gamma = f.gamma;
        }
        let exit_gamma = (0..d)
            .map(|j| {
                let mut exit = None;
                for f in fits.iter().rev() {
                    if f.support.contains(j) {
                        break;
                    }
                    exit = Some(f.gamma);
                }
                exit
            })
            .collect();
        SolutionPath {
            gammas,
            fits,
            limit_support,
            limit_gamma,
            exit_gamma,
        }
    }

    pub fn betas(&self) -> Vec<&[f64]> {
        self.fits.iter().map(|f| f.beta.as_slice()).collect()
    }
}

pub fn objective<T: Scalar>(
    beta: &DVector<f64>,
    m: &EnvMoments<f64>,
    w: &WeightTable<T>,
    gamma: f64,
    lambda: f64,
    mean_sq_y: f64,
) -> Result<f64> {
    let mut p = PenalizedProblem::new(m, w)?;
    p.mean_sq_y = mean_sq_y;
    check_len(beta, p.d())?;
    Ok(p.objective(beta, gamma, lambda))
}

pub fn solve<T: Scalar>(
    m: &EnvMoments<f64>,
    w: &WeightTable<T>,
    gamma: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<IgrFit> {
    PenalizedProblem::new(m, w)?.solve(gamma, lambda, opts)
}

pub fn kkt_residual<T: Scalar>(
    beta: &DVector<f64>,
    m: &EnvMoments<f64>,
    w: &WeightTable<T>,
    gamma: f64,
    lambda: f64,
) -> Result<f64> {
    let p = PenalizedProblem::new(m, w)?;
    check_len(beta, p.d())?;
    Ok(p.kkt_residual(beta, gamma, lambda))
}

pub fn solution_path<T: Scalar>(
    m: &EnvMoments<f64>,
    w: &WeightTable<T>,
    gammas: &[f64],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolutionPath> {
    PenalizedProblem::new(m, w)?.path(gammas, lambda, opts)
}

pub fn uncertainty_membership<T: Scalar>(
    beta: &DVector<f64>,
    m: &EnvMoments<f64>,
    w: &WeightTable<T>,
    gamma: f64,
) -> Result<Vec<f64>> {
    let p = PenalizedProblem::new(m, w)?;
    check_len(beta, p.d())?;
    Ok(p.uncertainty_slacks(beta, gamma))
}

fn check_len(beta: &DVector<f64>, d: usize) -> Result<()> {
    if beta.len() == d {
        Ok(())
    } else {
        Err(IgrError::DimensionMismatch(format!("β has {} entries, expected {d}", beta.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem(d: usize, seed: &[f64], factors: Vec<f64>) -> PenalizedProblem {
        let a = DMatrix::from_iterator(d, d, seed.iter().copied().cycle().take(d * d));
        let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
        let u = DVector::from_iterator(d, seed.iter().rev().copied().cycle().take(d));
        PenalizedProblem::from_parts(sigma, u, 1.0, factors).unwrap()
    }

    #[test]
    fn unpenalized_matches_linear_solve() {
        let p = problem(4, &[0.3, -0.7, 0.2, 0.9, -0.1], vec![1.0; 4]);
        let fit = p.solve(0.0, 0.0, &SolverOptions::default()).unwrap();
        let direct = p.sigma().clone().cholesky().unwrap().solve(p.u());
        assert!((fit.beta_vector() - direct).amax() < 1e-8);
    }

    #[test]
    fn zero_is_optimal_under_heavy_penalty() {
        let p = problem(3, &[0.5, 0.1, -0.4], vec![1.0, 2.0, 0.5]);
        let fit = p.solve(1e6, 0.0, &SolverOptions::default()).unwrap();
        assert!(fit.support.is_empty());
        assert_eq!(fit.objective, 0.5);
    }

    #[test]
    fn perturbed_active_coordinate_raises_kkt() {
        let p = problem(3, &[0.5, 0.1, -0.4, 0.8], vec![0.2, 0.3, 0.1]);
        let fit = p.solve(0.1, 0.0, &SolverOptions::default()).unwrap();
        let j = fit.support.indices()[0];
        let mut b = fit.beta_vector();
        b[j] += 1e-3;
        let r = p.kkt_residual(&b, 0.1, 0.0);
        // the gradient moves by Σ_{·j}·10⁻³; coordinate j itself is active
        let own = p.sigma()[(j, j)] * 1e-3;
        let widest = (p.sigma().column(j) * 1e-3).amax();
        assert!(r >= own - 1e-9 && r <= widest + 1e-9, "{r} vs [{own}, {widest}]");
    }

    #[test]
    fn singular_sigma_needs_lambda() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let u = DVector::from_vec(vec![1.0, 1.0]);
        let p = PenalizedProblem::from_parts(sigma, u, 1.0, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            p.solve(0.0, 0.0, &SolverOptions::default()),
            Err(IgrError::NotPositiveDefinite(_))
        ));
        let fit = p.solve(0.0, 0.1, &SolverOptions::default()).unwrap();
        assert!(fit.kkt_residual < 1e-9);
    }

    #[test]
    fn indefinite_sigma_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = PenalizedProblem::from_parts(sigma, DVector::zeros(2), 0.0, vec![0.0; 2]).unwrap_err();
        assert!(matches!(err, IgrError::NotPositiveDefinite(_)));
    }

    #[test]
    fn sweep_cap_reports_best_iterate() {
        let p = problem(5, &[0.9, 0.8, 0.85, 0.7, 0.95, 0.9], vec![0.1; 5]);
        let opts = SolverOptions {
            max_sweeps: 1,
            ..SolverOptions::default()
        };
        match p.solve(0.01, 0.0, &opts) {
            Err(IgrError::NotConverged { fit, sweeps, .. }) => {
                assert_eq!(sweeps, 1);
                assert!(!fit.converged);
            }
            Ok(fit) => assert!(fit.kkt_residual <= 1e-6),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn zero_weights_give_flat_path() {
        let p = problem(3, &[0.5, 0.1, -0.4, 0.8], vec![0.0; 3]);
        let path = p.path(&[0.0, 1.0, 10.0], 0.0, &SolverOptions::default()).unwrap();
        for f in &path.fits {
            for (a, b) in f.beta.iter().zip(&path.fits[0].beta) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(path.limit_gamma, 0.0);
        let single = p.path(&[2.0], 0.0, &SolverOptions::default()).unwrap();
        assert_eq!(single.fits.len(), 1);
        assert!(p.path(&[1.0, 0.5], 0.0, &SolverOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn cycling_order_does_not_matter(
            seed in proptest::collection::vec(-1.0f64..1.0, 16),
            factors in proptest::collection::vec(0.0f64..1.0, 4),
            gamma in 0.0f64..2.0,
        ) {
            let p = problem(4, &seed, factors.clone());
            let fit = p.solve(gamma, 0.0, &SolverOptions::default()).unwrap();
            // reversed coordinates give the same problem up to a permutation
            let perm: Vec<usize> = (0..4).rev().collect();
            let sigma = DMatrix::from_fn(4, 4, |i, j| p.sigma()[(perm[i], perm[j])]);
            let u = DVector::from_fn(4, |i, _| p.u()[perm[i]]);
            let f2: Vec<f64> = perm.iter().map(|&i| factors[i]).collect();
            let q = PenalizedProblem::from_parts(sigma, u, 1.0, f2).unwrap();
            let fit2 = q.solve(gamma, 0.0, &SolverOptions::default()).unwrap();
            for i in 0..4 {
                prop_assert!((fit.beta[perm[i]] - fit2.beta[i]).abs() < 1e-8);
            }
        }

        #[test]
        fn solutions_lie_in_uncertainty_set(
            seed in proptest::collection::vec(-1.0f64..1.0, 25),
            factors in proptest::collection::vec(0.0f64..1.0, 5),
            gamma in 0.0f64..3.0,
        ) {
            let p = problem(5, &seed, factors);
            let fit = p.solve(gamma, 0.0, &SolverOptions::default()).unwrap();
            prop_assert!(fit.kkt_residual <= 1e-6);
            for s in p.uncertainty_slacks(&fit.beta_vector(), gamma) {
                prop_assert!(s >= -1e-8);
            }
        }
    }
}
