//! Multi-environment data and second moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::linalg::{self, scatter, solve_restricted};
use crate::scalar::Scalar;
use crate::subset::IndexSet;

/// Samples from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Environment {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let id = id.into();
        if x.nrows() != y.len() {
            return Err(IgrError::DimensionMismatch(format!(
                "environment {id}: {} rows of X but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(IgrError::InvalidInput(format!("environment {id} has no samples")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(IgrError::NonFinite(format!("environment {id}")));
        }
        Ok(Environment { id, x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// Environments sharing the covariate dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEnvDataset {
    envs: Vec<Environment>,
}

impl MultiEnvDataset {
    pub fn new(envs: Vec<Environment>) -> Result<Self> {
        let first = envs
            .first()
            .ok_or_else(|| IgrError::InvalidInput("dataset has no environments".into()))?;
        let d = first.d();
        if d == 0 {
            return Err(IgrError::InvalidInput("dataset has no covariates".into()));
        }
        if let Some(bad) = envs.iter().find(|e| e.d() != d) {
            return Err(IgrError::DimensionMismatch(format!(
                "environment {} has {} covariates, expected {d}",
                bad.id,
                bad.d()
            )));
        }
        Ok(MultiEnvDataset { envs })
    }

    pub fn d(&self) -> usize {
        self.envs[0].d()
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn environments(&self) -> &[Environment] {
        &self.envs
    }

    pub fn into_environments(self) -> Vec<Environment> {
        self.envs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentOptions {
    /// Subtract per-environment means before forming moments.
    pub center: bool,
    /// Rescale columns so the pooled second moment of each covariate is one.
    pub normalize: bool,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions {
            center: true,
            normalize: false,
        }
    }
}

/// Preprocessing applied to raw samples, kept to map coefficients back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    /// Per-environment covariate means (zero when not centering).
    pub x_means: Vec<Vec<f64>>,
    pub y_means: Vec<f64>,
    /// Internal column is `x_j / scales[j]`.
    pub scales: Vec<f64>,
}

impl ColumnTransform {
    /// Coefficients on the internal scale to coefficients on the raw scale.
    pub fn to_original(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(beta.len(), beta.iter().zip(&self.scales).map(|(b, s)| b / s))
    }

    pub fn to_internal(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(beta.len(), beta.iter().zip(&self.scales).map(|(b, s)| b * s))
    }
}

/// Per-environment `Σ⁽ᵉ⁾ = E[XXᵀ]`, `u⁽ᵉ⁾ = E[XY]` and their equal-weight averages.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMoments<T: Scalar> {
    ids: Vec<String>,
    sigma: Vec<DMatrix<T>>,
    u: Vec<DVector<T>>,
    pooled_sigma: DMatrix<T>,
    pooled_u: DVector<T>,
    second_moment_y: Option<Vec<T>>,
    sample_sizes: Vec<usize>,
    positive_definite: Vec<bool>,
    transform: Option<ColumnTransform>,
}

impl<T: Scalar> EnvMoments<T> {
    /// Population moments; sample sizes are recorded as zero.
    pub fn new(sigma: Vec<DMatrix<T>>, u: Vec<DVector<T>>) -> Result<Self> {
        let n_env = sigma.len();
        if n_env == 0 || u.len() != n_env {
            return Err(IgrError::DimensionMismatch(format!(
                "{} covariance matrices and {} cross-moment vectors",
                n_env,
                u.len()
            )));
        }
        let d = sigma[0].nrows();
        if d == 0 {
            return Err(IgrError::InvalidInput("zero-dimensional moments".into()));
        }
        for (e, (s, v)) in sigma.iter().zip(&u).enumerate() {
            if s.nrows() != d || s.ncols() != d || v.len() != d {
                return Err(IgrError::DimensionMismatch(format!(
                    "environment {} moments are not {d}-dimensional",
                    e + 1
                )));
            }
            if s.iter().chain(v.iter()).any(|x| !x.to_f64().is_finite()) {
                return Err(IgrError::NonFinite(format!("moments of environment {}", e + 1)));
            }
            if !linalg::is_symmetric(s, 1e-9) {
                return Err(IgrError::InvalidInput(format!(
                    "covariance of environment {} is not symmetric",
                    e + 1
                )));
            }
        }
        let inv_e = T::one().div_ref(&T::from_i64(n_env as i64));
        let mut pooled_sigma = DMatrix::from_element(d, d, T::zero());
        let mut pooled_u = DVector::from_element(d, T::zero());
        for (s, v) in sigma.iter().zip(&u) {
            for i in 0..d {
                pooled_u[i].add_mul_assign(&inv_e, &v[i]);
                for j in 0..d {
                    pooled_sigma[(i, j)].add_mul_assign(&inv_e, &s[(i, j)]);
                }
            }
        }
        let positive_definite = sigma
            .iter()
            .map(|s| linalg::is_positive_definite(&linalg::to_f64_matrix(s)))
            .collect();
        Ok(EnvMoments {
            ids: (1..=n_env).map(|e| format!("env{e}")).collect(),
            sigma,
            u,
            pooled_sigma,
            pooled_u,
            second_moment_y: None,
            sample_sizes: vec![0; n_env],
            positive_definite,
            transform: None,
        })
    }

    /// Attaches `E[Y⁽ᵉ⁾²]` per environment.
    pub fn with_second_moment_y(mut self, values: Vec<T>) -> Result<Self> {
        if values.len() != self.n_envs() {
            return Err(IgrError::DimensionMismatch(format!(
                "{} response second moments for {} environments",
                values.len(),
                self.n_envs()
            )));
        }
        self.second_moment_y = Some(values);
        Ok(self)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_envs() {
            return Err(IgrError::DimensionMismatch("one id per environment required".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.pooled_u.len()
    }

    pub fn n_envs(&self) -> usize {
        self.sigma.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn sigma(&self, env: usize) -> &DMatrix<T> {
        &self.sigma[env]
    }

    pub fn u(&self, env: usize) -> &DVector<T> {
        &self.u[env]
    }

    pub fn pooled_sigma(&self) -> &DMatrix<T> {
        &self.pooled_sigma
    }

    pub fn pooled_u(&self) -> &DVector<T> {
        &self.pooled_u
    }

    pub fn second_moment_y(&self) -> Option<&[T]> {
        self.second_moment_y.as_deref()
    }

    /// Equal-weight average of `E[Y⁽ᵉ⁾²]`, when known.
    pub fn mean_sq_y(&self) -> Option<T> {
        let v = self.second_moment_y.as_ref()?;
        let mut total = T::zero();
        for x in v {
            total = total.add_ref(x);
        }
        Some(total.div_ref(&T::from_i64(v.len() as i64)))
    }

    pub fn sample_sizes(&self) -> &[usize] {
        &self.sample_sizes
    }

    pub fn positive_definite(&self) -> &[bool] {
        &self.positive_definite
    }

    pub fn transform(&self) -> Option<&ColumnTransform> {
        self.transform.as_ref()
    }

    /// Solves the restricted normal equations of one environment, or the
    /// pooled ones when `env` is `None`. Coordinates follow `idx`.
    pub fn solve_on(&self, env: Option<usize>, idx: &[usize]) -> Option<Vec<T>> {
        match env {
            Some(e) => solve_restricted(&self.sigma[e], &self.u[e], idx),
            None => solve_restricted(&self.pooled_sigma, &self.pooled_u, idx),
        }
    }

    /// Smallest eigenvalue over environments (float approximation).
    pub fn min_eigenvalue(&self) -> f64 {
        self.sigma
            .iter()
            .map(|s| linalg::eigen_range(&linalg::to_f64_matrix(s)).0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_f64(&self) -> EnvMoments<f64> {
        EnvMoments {
            ids: self.ids.clone(),
            sigma: self.sigma.iter().map(linalg::to_f64_matrix).collect(),
            u: self.u.iter().map(linalg::to_f64_vector).collect(),
            pooled_sigma: linalg::to_f64_matrix(&self.pooled_sigma),
            pooled_u: linalg::to_f64_vector(&self.pooled_u),
            second_moment_y: self
                .second_moment_y
                .as_ref()
                .map(|v| v.iter().map(|x| x.to_f64()).collect()),
            sample_sizes: self.sample_sizes.clone(),
            positive_definite: self.positive_definite.clone(),
            transform: self.transform.clone(),
        }
    }
}

/// Estimates moments from samples.
///
/// Environments are weighted equally whatever their sample sizes.
pub fn moments_from_samples(data: &MultiEnvDataset, opts: &MomentOptions) -> Result<EnvMoments<f64>> {
    let d = data.d();
    let mut sigma = Vec::with_capacity(data.len());
    let mut u = Vec::with_capacity(data.len());
    let mut ey2 = Vec::with_capacity(data.len());
    let mut x_means = Vec::with_capacity(data.len());
    let mut y_means = Vec::with_capacity(data.len());
    for env in data.environments() {
        let n = env.n() as f64;
        let (x, y, xm, ym) = if opts.center {
            let xm = env.x.row_mean();
            let ym = env.y.mean();
            let mut x = env.x.clone();
            for mut row in x.row_iter_mut() {
                row -= &xm;
            }
            let y = env.y.add_scalar(-ym);
            (x, y, xm.iter().copied().collect(), ym)
        } else {
            (env.x.clone(), env.y.clone(), vec![0.0; d], 0.0)
        };
        let xt = x.transpose();
        let mut s = &xt * &x / n;
        // exact symmetry regardless of summation order
        s = (&s + s.transpose()) * 0.5;
        sigma.push(s);
        u.push(&xt * &y / n);
        ey2.push(y.norm_squared() / n);
        x_means.push(xm);
        y_means.push(ym);
    }
    let e = data.len() as f64;
    let mut scales = vec![1.0; d];
    if opts.normalize {
        for (j, scale) in scales.iter_mut().enumerate() {
            let pooled: f64 = sigma.iter().map(|s| s[(j, j)]).sum::<f64>() / e;
            if !(pooled.sqrt() > 1e-12 * max_abs_column(data, j).max(1.0)) {
                return Err(IgrError::ZeroVariance { column: j });
            }
            *scale = pooled.sqrt();
        }
        for (s, v) in sigma.iter_mut().zip(u.iter_mut()) {
            for i in 0..d {
                v[i] /= scales[i];
                for j in 0..d {
                    s[(i, j)] /= scales[i] * scales[j];
                }
            }
        }
    }
    let mut m = EnvMoments::new(sigma, u)?.with_second_moment_y(ey2)?;
    m.ids = data.environments().iter().map(|e| e.id.clone()).collect();
    m.sample_sizes = data.environments().iter().map(|e| e.n()).collect();
    m.transform = Some(ColumnTransform {
        x_means,
        y_means,
        scales,
    });
    if opts.normalize {
        for j in 0..d {
            m.pooled_sigma[(j, j)] = 1.0;
        }
    }
    Ok(m)
}

fn max_abs_column(data: &MultiEnvDataset, j: usize) -> f64 {
    data.environments()
        .iter()
        .flat_map(|e| e.x.column(j).iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Restricted least-squares coefficients, per environment and pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedCoef<T: Scalar> {
    pub subset: IndexSet,
    pub per_env: Vec<DVector<T>>,
    pub pooled: DVector<T>,
}

impl<T: Scalar> RestrictedCoef<T> {
    /// Whether every environment agrees with the pooled coefficients.
    pub fn is_invariant(&self, tol: f64) -> bool {
        self.per_env.iter().all(|b| {
            b.iter().zip(self.pooled.iter()).all(|(x, y)| {
                if T::EXACT {
                    x == y
                } else {
                    (x.to_f64() - y.to_f64()).abs() <= tol
                }
            })
        })
    }
}

pub fn restricted_ls<T: Scalar>(m: &EnvMoments<T>, subset: &IndexSet) -> Result<RestrictedCoef<T>> {
    let d = m.d();
    if subset.max().is_some_and(|j| j >= d) {
        return Err(IgrError::DimensionMismatch(format!("subset {subset} outside [1, {d}]")));
    }
    let idx = subset.indices();
    let mut per_env = Vec::with_capacity(m.n_envs());
    for e in 0..m.n_envs() {
        let b = m.solve_on(Some(e), idx).ok_or_else(|| IgrError::Singular {
            subset: subset.clone(),
            env: Some(e),
        })?;
        per_env.push(scatter(d, idx, &b));
    }
    let pooled = m.solve_on(None, idx).ok_or_else(|| IgrError::Singular {
        subset: subset.clone(),
        env: None,
    })?;
    Ok(RestrictedCoef {
        subset: subset.clone(),
        per_env,
        pooled: scatter(d, idx, &pooled),
    })
}

/// `½βᵀΣβ − βᵀu + ½·mean_sq_y` on the pooled moments.
pub fn pooled_risk<T: Scalar>(beta: &DVector<T>, m: &EnvMoments<T>, mean_sq_y: &T) -> Result<T> {
    if beta.len() != m.d() {
        return Err(IgrError::DimensionMismatch(format!(
            "coefficient length {} but d = {}",
            beta.len(),
            m.d()
        )));
    }
    let all: Vec<usize> = (0..m.d()).collect();
    let beta_vec: Vec<T> = beta.iter().cloned().collect();
    let quad = linalg::quad_form_restricted(m.pooled_sigma(), &all, &beta_vec);
    let mut lin = T::zero();
    for j in 0..m.d() {
        lin.add_mul_assign(&beta[j], &m.pooled_u()[j]);
    }
    let half = T::from_ratio(1, 2);
    Ok(half.mul_ref(&quad).sub_ref(&lin).add_ref(&half.mul_ref(mean_sq_y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Rational;

    fn q(n: i64, d: i64) -> Rational {
        Rational::from_ratio(n, d)
    }

    #[test]
    fn identity_rows_give_scaled_identity() {
        let d = 3;
        let mut rows = Vec::new();
        for _ in 0..4 {
            for i in 0..d {
                let mut r = vec![0.0; d];
                r[i] = 1.0;
                rows.extend(r);
            }
        }
        let x = DMatrix::from_row_slice(4 * d, d, &rows);
        let env = Environment::new("a", x, DVector::zeros(4 * d)).unwrap();
        let data = MultiEnvDataset::new(vec![env]).unwrap();
        let opts = MomentOptions {
            center: false,
            normalize: false,
        };
        let m = moments_from_samples(&data, &opts).unwrap();
        assert!((m.pooled_sigma() - DMatrix::identity(d, d) / d as f64).abs().max() < 1e-15);
        assert_eq!(m.pooled_u().abs().max(), 0.0);
    }

    #[test]
    fn empty_subset_and_risk_at_zero() {
        let s = DMatrix::from_row_slice(2, 2, &[q(2, 1), q(1, 2), q(1, 2), q(1, 1)]);
        let u = DVector::from_vec(vec![q(1, 1), q(1, 3)]);
        let m = EnvMoments::new(vec![s], vec![u]).unwrap();
        let r = restricted_ls(&m, &IndexSet::empty()).unwrap();
        assert!(r.pooled.iter().all(|v| *v == q(0, 1)));
        let risk = pooled_risk(&DVector::from_element(2, q(0, 1)), &m, &q(7, 3)).unwrap();
        assert_eq!(risk, q(7, 6));
    }

    #[test]
    fn zero_variance_rejected_when_normalizing() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let env = Environment::new("a", x, DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let data = MultiEnvDataset::new(vec![env]).unwrap();
        let err = moments_from_samples(
            &data,
            &MomentOptions {
                center: true,
                normalize: true,
            },
        )
        .unwrap_err();
        assert!(matches!(err, IgrError::ZeroVariance { column: 1 }));
    }

    #[test]
    fn non_finite_and_mismatch_rejected() {
        let x = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(
            Environment::new("a", x, DVector::from_vec(vec![1.0])),
            Err(IgrError::NonFinite(_))
        ));
        let a = Environment::new("a", DMatrix::zeros(1, 2), DVector::zeros(1)).unwrap();
        let b = Environment::new("b", DMatrix::zeros(1, 3), DVector::zeros(1)).unwrap();
        assert!(matches!(
            MultiEnvDataset::new(vec![a, b]),
            Err(IgrError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn singular_reports_environment() {
        let s1 = DMatrix::from_row_slice(2, 2, &[q(1, 1), q(0, 1), q(0, 1), q(1, 1)]);
        let s2 = DMatrix::from_row_slice(2, 2, &[q(1, 1), q(1, 1), q(1, 1), q(1, 1)]);
        let u = DVector::from_vec(vec![q(1, 1), q(1, 1)]);
        let m = EnvMoments::new(vec![s1, s2], vec![u.clone(), u]).unwrap();
        let err = restricted_ls(&m, &IndexSet::full(2)).unwrap_err();
        assert!(matches!(err, IgrError::Singular { env: Some(1), .. }));
    }
}
