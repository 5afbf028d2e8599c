//! Grid search over `(γ, λ)` with validation-based selection, evaluation
//! metrics and the estimation-rate experiment.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::io::WeightsJson;
use crate::moments::{moments_from_samples, Environment, MomentOptions, MultiEnvDataset};
use crate::scalar::Scalar;
use crate::scm::{population_moments, sample, LinearScm};
use crate::solver::{PenalizedProblem, SolverOptions};
use crate::subset::IndexSet;
use crate::variation::{weight_table, WeightConvention};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `{0} ∪ {2^i : i = -5..=5}`
pub fn default_gamma_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-5..=5).map(|i| 2f64.powi(i))).collect()
}

/// `{0} ∪ {2^i : i = -10..=0}`
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-10..=0).map(|i| 2f64.powi(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub k: usize,
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Subtract per-environment means from training, validation and test data.
    pub center: bool,
    pub normalize: bool,
    pub convention: WeightConvention,
    pub solver: SolverOptions,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            k: 2,
            gammas: default_gamma_grid(),
            lambdas: default_lambda_grid(),
            center: true,
            normalize: false,
            convention: WeightConvention::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(IgrError::InvalidInput("k must be at least 1".into()));
        }
        for (name, grid) in [("gamma", &self.gammas), ("lambda", &self.lambdas)] {
            if grid.is_empty() {
                return Err(IgrError::InvalidInput(format!("{name} grid is empty")));
            }
            if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(IgrError::InvalidInput(format!("{name} grid contains {v}")));
            }
        }
        Ok(())
    }

    fn moment_options(&self) -> MomentOptions {
        MomentOptions { center: self.center, normalize: self.normalize }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub gamma: f64,
    pub lambda: f64,
    /// Validation mean squared error, averaged over validation environments.
    pub validation_loss: f64,
    pub support: IndexSet,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub worst_case_r2: f64,
    /// Sum of squared residuals per test environment.
    pub mse: Vec<f64>,
    pub environments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub weights_ms: f64,
    pub grid_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub config: GridConfig,
    pub d: usize,
    pub train_environments: Vec<String>,
    pub train_sizes: Vec<usize>,
    pub validation_sizes: Vec<usize>,
    pub weights: WeightsJson,
    pub selected_gamma: f64,
    pub selected_lambda: f64,
    /// Coefficients on the scale of the input columns.
    pub beta: Vec<f64>,
    pub support: IndexSet,
    /// Cells in `γ`-major, ascending order.
    pub cells: Vec<GridCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestMetrics>,
    pub timings: Timings,
}

impl FitReport {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// An environment with its own column means removed.
pub fn centered(env: &Environment) -> Environment {
    let xm = env.x.row_mean();
    let mut x = env.x.clone();
    for mut row in x.row_iter_mut() {
        row -= &xm;
    }
    let y = env.y.add_scalar(-env.y.mean());
    Environment { id: env.id.clone(), x, y }
}

fn prepared(envs: &[Environment], center: bool) -> Vec<Environment> {
    envs.iter().map(|e| if center { centered(e) } else { e.clone() }).collect()
}

/// Sum over samples of squared residuals.
pub fn mse(beta: &DVector<f64>, env: &Environment) -> Result<f64> {
    if beta.len() != env.d() {
        return Err(IgrError::DimensionMismatch(format!("β has {} entries, data has {} columns", beta.len(), env.d())));
    }
    Ok((&env.y - &env.x * beta).norm_squared())
}

/// Multi-target form: `B` is `d × q`, `Y` is `n × q`, and each sample
/// contributes the squared 2-norm of its residual vector.
pub fn mse_multi(b: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() != b.nrows() || y.ncols() != b.ncols() || x.nrows() != y.nrows() {
        return Err(IgrError::DimensionMismatch("shapes of B, X and Y disagree".into()));
    }
    Ok((y - x * b).norm_squared())
}

/// `min_e 1 − Σ(Y − Ŷ)² / ΣY²`.
pub fn worst_case_r2(beta: &DVector<f64>, tests: &[Environment]) -> Result<f64> {
    if tests.is_empty() {
        return Err(IgrError::InvalidInput("no test environment".into()));
    }
    let mut worst = f64::INFINITY;
    for env in tests {
        let total = env.y.norm_squared();
        if total == 0.0 {
            return Err(IgrError::InvalidInput(format!("response of `{}` is identically zero", env.id)));
        }
        worst = worst.min(1.0 - mse(beta, env)? / total);
    }
    Ok(worst)
}

pub fn test_metrics(beta: &DVector<f64>, tests: &MultiEnvDataset, center: bool) -> Result<TestMetrics> {
    let envs = prepared(tests.environments(), center);
    Ok(TestMetrics {
        worst_case_r2: worst_case_r2(beta, &envs)?,
        mse: envs.iter().map(|e| mse(beta, e)).collect::<Result<_>>()?,
        environments: envs.iter().map(|e| e.id.clone()).collect(),
    })
}

/// Computes the weights once, solves every grid cell and keeps the cell with
/// the smallest validation loss; ties go to the smaller `γ`, then the
/// smaller `λ`.
pub fn igr_fit(
    train: &MultiEnvDataset,
    valid: &MultiEnvDataset,
    test: Option<&MultiEnvDataset>,
    cfg: &GridConfig,
) -> Result<FitReport> {
    let start = Instant::now();
    cfg.validate()?;
    let d = train.d();
    if valid.d() != d || test.is_some_and(|t| t.d() != d) {
        return Err(IgrError::DimensionMismatch("training and evaluation data have different d".into()));
    }
    let valid_envs = prepared(valid.environments(), cfg.center);

    let m = moments_from_samples(train, &cfg.moment_options())?;
    let transform = m.transform().cloned().expect("sample moments record their transform");
    let w = weight_table(&m, cfg.k.min(d))?.with_convention(cfg.convention);
    let weights_ms = start.elapsed().as_secs_f64() * 1e3;

    let problem = PenalizedProblem::new(&m, &w)?;
    let mut grid: Vec<(f64, f64)> = Vec::with_capacity(cfg.gammas.len() * cfg.lambdas.len());
    let mut gammas = cfg.gammas.clone();
    let mut lambdas = cfg.lambdas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    for &g in &gammas {
        for &l in &lambdas {
            grid.push((g, l));
        }
    }
    let grid_start = Instant::now();
    let fits = grid
        .par_iter()
        .map(|&(g, l)| {
            let fit = problem.solve(g, l, &cfg.solver)?;
            let beta = transform.to_original(&fit.beta_vector());
            let mut loss = 0.0;
            for env in &valid_envs {
                loss += mse(&beta, env)? / env.n() as f64;
            }
            loss /= valid_envs.len() as f64;
            Ok((fit, beta, loss))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let grid_ms = grid_start.elapsed().as_secs_f64() * 1e3;

    let mut best = 0;
    for (i, (_, _, loss)) in fits.iter().enumerate() {
        if *loss < fits[best].2 {
            best = i;
        }
    }
    if !fits[best].2.is_finite() {
        return Err(IgrError::NonFinite("validation loss".into()));
    }
    let cells = fits
        .iter()
        .map(|(fit, _, loss)| GridCell {
            gamma: fit.gamma,
            lambda: fit.lambda,
            validation_loss: *loss,
            support: fit.support.clone(),
            converged: fit.converged,
        })
        .collect();
    let (fit, beta, _) = &fits[best];
    let test = test.map(|t| test_metrics(beta, t, cfg.center)).transpose()?;
    Ok(FitReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        d,
        train_environments: train.environments().iter().map(|e| e.id.clone()).collect(),
        train_sizes: train.environments().iter().map(|e| e.n()).collect(),
        validation_sizes: valid.environments().iter().map(|e| e.n()).collect(),
        weights: WeightsJson::from_table(&w),
        selected_gamma: fit.gamma,
        selected_lambda: fit.lambda,
        beta: beta.iter().copied().collect(),
        support: fit.support.clone(),
        cells,
        test,
        timings: Timings { weights_ms, grid_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub median_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub k: usize,
    pub gamma: f64,
    /// Population target `β^{k,γ}`.
    pub target: Vec<f64>,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `log median` against `log n`.
    pub slope: f64,
    pub monotone: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median of `‖β̂^{k,γ} − β^{k,γ}‖₂` over seeds for each sample size, where
/// `β̂` uses `n` samples per environment and `β` the population moments.
/// Seeds `0..seeds` are used at every `n`.
pub fn rate_experiment<T: Scalar>(
    scm: &LinearScm<T>,
    k: usize,
    gamma: f64,
    n_grid: &[usize],
    seeds: u64,
) -> Result<RateTable> {
    if n_grid.is_empty() || seeds == 0 {
        return Err(IgrError::InvalidInput("need at least one sample size and one seed".into()));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IgrError::InvalidInput("sample sizes must be strictly increasing".into()));
    }
    let opts = SolverOptions::default();
    let pop = population_moments(scm)?.moments.to_f64();
    let pop_w = weight_table(&pop, k)?;
    let target = PenalizedProblem::new(&pop, &pop_w)?.solve(gamma, 0.0, &opts)?.beta_vector();

    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let errors = (0..seeds)
            .into_par_iter()
            .map(|seed| {
                let data = sample(scm, n, seed)?;
                let m = moments_from_samples(&data, &MomentOptions::default())?;
                let w = weight_table(&m, k)?;
                let fit = PenalizedProblem::new(&m, &w)?.solve(gamma, 0.0, &opts)?;
                Ok((fit.beta_vector() - &target).norm())
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(RateRow { n, median_error: median(&errors), errors });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_error.ln()).collect();
    let slope = if xs.len() < 2 {
        f64::NAN
    } else {
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    };
    let monotone = rows.windows(2).all(|w| w[1].median_error < w[0].median_error);
    Ok(RateTable { k, gamma, target: target.iter().copied().collect(), rows, slope, monotone })
}
