//! Linear acyclic structural causal models over `X_1 … X_d, Y`.
//!
//! Variable `i < d` is covariate `X_{i+1}`; variable `d` is the response.
//! In every environment `V = C V + diag(s) ε` with independent standard
//! normal `ε`, so population moments follow exactly from `C` and `s`.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::moments::{EnvMoments, Environment, MultiEnvDataset};
use crate::scalar::{Rational, Scalar, Surd};
use crate::subset::IndexSet;

/// Structural assignments of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmEnvironment<T: Scalar> {
    pub id: String,
    /// `coefficients[(child, parent)]`, `(d+1) × (d+1)`.
    pub coefficients: DMatrix<T>,
    /// Scale of each variable's own noise.
    pub noise: DVector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearScm<T: Scalar> {
    d: usize,
    envs: Vec<ScmEnvironment<T>>,
    order: Vec<usize>,
}

impl<T: Scalar> LinearScm<T> {
    pub fn new(d: usize, envs: Vec<ScmEnvironment<T>>) -> Result<Self> {
        let p = d + 1;
        if d == 0 || envs.is_empty() {
            return Err(IgrError::InvalidInput("an SCM needs covariates and environments".into()));
        }
        for env in &envs {
            if env.coefficients.shape() != (p, p) || env.noise.len() != p {
                return Err(IgrError::DimensionMismatch(format!(
                    "environment {} does not describe {p} variables",
                    env.id
                )));
            }
            if (0..p).any(|i| !env.coefficients[(i, i)].is_zero()) {
                return Err(IgrError::InvalidInput(format!("self-loop in environment {}", env.id)));
            }
        }
        let response = envs[0].coefficients.row(d).clone_owned();
        if envs.iter().any(|e| e.coefficients.row(d) != response) {
            return Err(IgrError::InvalidInput(
                "the response assignment differs across environments".into(),
            ));
        }
        let order = topological_order(p, &envs)?;
        Ok(LinearScm { d, envs, order })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn environments(&self) -> &[ScmEnvironment<T>] {
        &self.envs
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Adds an environment (for instance a held-out test distribution).
    pub fn with_environment(self, env: ScmEnvironment<T>) -> Result<Self> {
        let mut envs = self.envs;
        envs.push(env);
        LinearScm::new(self.d, envs)
    }

    /// Keeps only the listed environments, in the given order.
    pub fn select_environments(&self, which: &[usize]) -> Result<Self> {
        let envs = which
            .iter()
            .map(|&e| {
                self.envs
                    .get(e)
                    .cloned()
                    .ok_or_else(|| IgrError::InvalidInput(format!("no environment {}", e + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        LinearScm::new(self.d, envs)
    }

    /// Causal coefficients of the response on the covariates.
    pub fn beta_star(&self) -> DVector<T> {
        DVector::from_iterator(self.d, (0..self.d).map(|j| self.envs[0].coefficients[(self.d, j)].clone()))
    }

    pub fn parents_of_response(&self) -> IndexSet {
        IndexSet::new((0..self.d).filter(|&j| !self.envs[0].coefficients[(self.d, j)].is_zero()))
    }

    pub fn to_f64(&self) -> LinearScm<f64> {
        LinearScm {
            d: self.d,
            envs: self
                .envs
                .iter()
                .map(|e| ScmEnvironment {
                    id: e.id.clone(),
                    coefficients: e.coefficients.map(|v| v.to_f64()),
                    noise: e.noise.map(|v| v.to_f64()),
                })
                .collect(),
            order: self.order.clone(),
        }
    }
}

fn topological_order<T: Scalar>(p: usize, envs: &[ScmEnvironment<T>]) -> Result<Vec<usize>> {
    let edge = |child: usize, parent: usize| envs.iter().any(|e| !e.coefficients[(child, parent)].is_zero());
    let mut indegree: Vec<usize> = (0..p).map(|c| (0..p).filter(|&q| edge(c, q)).count()).collect();
    let mut ready: Vec<usize> = (0..p).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(p);
    while let Some(v) = ready.pop() {
        order.push(v);
        for c in 0..p {
            if edge(c, v) {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
    }
    if order.len() != p {
        return Err(IgrError::InvalidInput("the causal graph has a cycle".into()));
    }
    Ok(order)
}

/// Loadings of every variable on the exogenous noises, `V = L ε`.
fn loadings<T: Scalar>(env: &ScmEnvironment<T>, order: &[usize]) -> DMatrix<T> {
    let p = env.noise.len();
    let mut l = DMatrix::from_element(p, p, T::zero());
    for &i in order {
        let mut row = vec![T::zero(); p];
        row[i] = env.noise[i].clone();
        for k in 0..p {
            let c = &env.coefficients[(i, k)];
            if c.is_zero() {
                continue;
            }
            for (t, r) in row.iter_mut().enumerate() {
                r.add_mul_assign(c, &l[(k, t)]);
            }
        }
        for (t, r) in row.into_iter().enumerate() {
            l[(i, t)] = r;
        }
    }
    l
}

/// Exact population quantities of an SCM.
#[derive(Clone, Debug)]
pub struct ScmOracle<T: Scalar> {
    /// Σ⁽ᵉ⁾, u⁽ᵉ⁾ and E[Y⁽ᵉ⁾²].
    pub moments: EnvMoments<T>,
    pub beta_star: DVector<T>,
    pub s_star: IndexSet,
    /// `E[X ε⁽ᵉ⁾]` per environment, with `ε = Y − β*ᵀX`.
    pub noise_cov: Vec<DVector<T>>,
    /// Covariates outside `S*` correlated with the noise on average.
    pub endogenous: IndexSet,
}

impl<T: Scalar> ScmOracle<T> {
    pub fn pooled_noise_cov(&self) -> DVector<T> {
        let n = T::from_i64(self.noise_cov.len() as i64);
        let mut acc = DVector::from_element(self.beta_star.len(), T::zero());
        for v in &self.noise_cov {
            for j in 0..v.len() {
                acc[j] = acc[j].add_ref(&v[j]);
            }
        }
        acc.map(|x| x.div_ref(&n))
    }
}

/// `L Lᵀ` without requiring the nalgebra arithmetic traits on `T`.
fn gram<T: Scalar>(l: &DMatrix<T>) -> DMatrix<T> {
    let (n, p) = l.shape();
    let mut out = DMatrix::from_element(n, n, T::zero());
    for i in 0..n {
        for j in 0..=i {
            let mut acc = T::zero();
            for k in 0..p {
                acc.add_mul_assign(&l[(i, k)], &l[(j, k)]);
            }
            out[(j, i)] = acc.clone();
            out[(i, j)] = acc;
        }
    }
    out
}

pub fn population_moments<T: Scalar>(scm: &LinearScm<T>) -> Result<ScmOracle<T>> {
    let d = scm.d;
    let mut sigma = Vec::new();
    let mut u = Vec::new();
    let mut ey2 = Vec::new();
    for env in &scm.envs {
        let l = loadings(env, &scm.order);
        let cov = gram(&l);
        sigma.push(cov.view((0, 0), (d, d)).clone_owned());
        u.push(cov.view((0, d), (d, 1)).column(0).clone_owned());
        ey2.push(cov[(d, d)].clone());
    }
    let moments = EnvMoments::new(sigma, u)?
        .with_second_moment_y(ey2)?
        .with_ids(scm.envs.iter().map(|e| e.id.clone()).collect())?;
    let beta_star = scm.beta_star();
    let s_star = scm.parents_of_response();
    let noise_cov: Vec<DVector<T>> = (0..moments.n_envs())
        .map(|e| {
            let s = moments.sigma(e);
            DVector::from_iterator(
                d,
                (0..d).map(|i| {
                    let mut r = moments.u(e)[i].clone();
                    for j in s_star.iter() {
                        r.sub_mul_assign(&s[(i, j)], &beta_star[j]);
                    }
                    r
                }),
            )
        })
        .collect();
    let scale = moments.mean_sq_y().map(|v| v.to_f64()).unwrap_or(1.0);
    let mut oracle = ScmOracle {
        moments,
        beta_star,
        s_star,
        noise_cov,
        endogenous: IndexSet::empty(),
    };
    let pooled = oracle.pooled_noise_cov();
    oracle.endogenous = IndexSet::new((0..d).filter(|&j| !oracle.s_star.contains(j) && !pooled[j].negligible(scale)));
    Ok(oracle)
}

/// Ancestral sampling with standard normal noise, `n` rows per environment.
pub fn sample<T: Scalar>(scm: &LinearScm<T>, n: usize, seed: u64) -> Result<MultiEnvDataset> {
    if n == 0 {
        return Err(IgrError::InvalidInput("sample size must be positive".into()));
    }
    let scm = scm.to_f64();
    let d = scm.d;
    let p = d + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs = Vec::with_capacity(scm.envs.len());
    for env in &scm.envs {
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut v = vec![0.0; p];
        for row in 0..n {
            let noise: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            for &i in &scm.order {
                let mut value = env.noise[i] * noise[i];
                for k in 0..p {
                    value += env.coefficients[(i, k)] * v[k];
                }
                v[i] = value;
            }
            for j in 0..d {
                x[(row, j)] = v[j];
            }
            y[row] = v[d];
        }
        envs.push(Environment::new(env.id.clone(), x, y)?);
    }
    MultiEnvDataset::new(envs)
}

/// Worked examples with exact coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleName {
    /// Four covariates; `{1,2}` and `{1,2,4}` are maximum invariant sets.
    Ex2_1,
    /// Two covariates without a maximum invariant set.
    Ex2_2,
    /// One causal and two reverse-causal covariates.
    Ex3_1,
}

impl FromStr for ExampleName {
    type Err = IgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ex2_1" => Ok(ExampleName::Ex2_1),
            "ex2_2" => Ok(ExampleName::Ex2_2),
            "ex3_1" => Ok(ExampleName::Ex3_1),
            other => Err(IgrError::InvalidInput(format!(
                "unknown example {other:?} (expected ex2_1, ex2_2 or ex3_1)"
            ))),
        }
    }
}

fn qs(n: i64, d: i64) -> Surd {
    Surd::from_ratio_i(n, d)
}

fn sqrt_q(n: u64, d: u64) -> Surd {
    Surd::sqrt_ratio(n, d)
}

struct EnvBuilder {
    p: usize,
    c: DMatrix<Surd>,
    s: DVector<Surd>,
}

impl EnvBuilder {
    fn new(p: usize) -> Self {
        EnvBuilder {
            p,
            c: DMatrix::from_element(p, p, Surd::default()),
            s: DVector::from_element(p, Surd::from_ratio_i(1, 1)),
        }
    }

    fn edge(mut self, child: usize, parent: usize, coef: Surd) -> Self {
        self.c[(child, parent)] = coef;
        self
    }

    fn noise(mut self, i: usize, scale: Surd) -> Self {
        self.s[i] = scale;
        self
    }

    fn build(self, id: &str) -> ScmEnvironment<Surd> {
        debug_assert_eq!(self.c.nrows(), self.p);
        ScmEnvironment {
            id: id.to_string(),
            coefficients: self.c,
            noise: self.s,
        }
    }
}

pub fn make_example(name: ExampleName) -> LinearScm<Surd> {
    let envs = match name {
        ExampleName::Ex2_1 => {
            // X1, X2, X4 exogenous; Y = 2X1 + X2 + ε0; X3 = ((√3)^(e−2) Y + ε3)/√5
            let y = 4;
            let base = |id: &str, x3_from_y: Surd| {
                EnvBuilder::new(5)
                    .edge(y, 0, qs(2, 1))
                    .edge(y, 1, qs(1, 1))
                    .edge(2, y, x3_from_y)
                    .noise(2, sqrt_q(1, 5))
                    .build(id)
            };
            vec![base("env1", sqrt_q(1, 15)), base("env2", sqrt_q(1, 5))]
        }
        ExampleName::Ex2_2 => {
            let y = 2;
            let base = |id: &str, x2_from_y: Surd| {
                EnvBuilder::new(3)
                    .noise(0, sqrt_q(1, 2))
                    .edge(y, 0, qs(1, 1))
                    .noise(y, sqrt_q(1, 2))
                    .edge(1, y, x2_from_y)
                    .build(id)
            };
            vec![base("env1", qs(1, 2)), base("env2", qs(2, 1))]
        }
        ExampleName::Ex3_1 => vec![
            ex3_1_environment("env1", (qs(2, 3), qs(1, 3)), (qs(2, 3), qs(1, 3))),
            ex3_1_environment("env2", (qs(1, 2), sqrt_q(1, 2)), (qs(1, 4), sqrt_q(7, 8))),
        ],
    };
    let d = envs[0].noise.len() - 1;
    LinearScm::new(d, envs).expect("worked examples are valid SCMs")
}

fn ex3_1_environment(id: &str, x2: (Surd, Surd), x3: (Surd, Surd)) -> ScmEnvironment<Surd> {
    let y = 3;
    EnvBuilder::new(4)
        .edge(y, 0, qs(1, 1))
        .edge(1, y, x2.0)
        .noise(1, x2.1)
        .edge(2, y, x3.0)
        .noise(2, x3.1)
        .build(id)
}

/// A shifted environment for the three-covariate example in which both
/// reverse-causal effects shrink to `Y/(3√2)` while covariances stay unit.
pub fn ex3_1_shifted_environment() -> ScmEnvironment<Surd> {
    let weak = Surd::term(2, Rational::from_ratio(1, 6));
    let rest = sqrt_q(8, 9);
    ex3_1_environment("shifted", (weak.clone(), rest.clone()), (weak, rest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScmRegime {
    /// Every covariate is intervened on.
    General,
    /// Causal parents fall into mutually uncorrelated blocks of at most
    /// `block_size` variables.
    BlockOrthogonal { block_size: usize },
    /// No ancestor of the response is intervened on.
    NoAncestorIntervention,
}

impl FromStr for ScmRegime {
    type Err = IgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "general" => Ok(ScmRegime::General),
            None if s == "no-ancestor-intervention" => Ok(ScmRegime::NoAncestorIntervention),
            Some(("block-orthogonal", b)) => {
                let block_size: usize = b
                    .parse()
                    .map_err(|_| IgrError::InvalidInput(format!("bad block size {b:?}")))?;
                if block_size == 0 {
                    return Err(IgrError::InvalidInput("block size must be positive".into()));
                }
                Ok(ScmRegime::BlockOrthogonal { block_size })
            }
            _ => Err(IgrError::InvalidInput(format!(
                "unknown regime {s:?} (general, block-orthogonal:<k>, no-ancestor-intervention)"
            ))),
        }
    }
}

fn draw_coef(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.2..=1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// A random linear SCM with `n_envs` environments.
///
/// Coefficient magnitudes are uniform on `[0.2, 1]` with random sign;
/// intervened variables redraw their incoming coefficients and a noise scale
/// in `[0.5, 1.5]` per environment. Children of the response are rescaled to
/// unit variance in every environment.
pub fn random_scm(d: usize, regime: ScmRegime, n_envs: usize, seed: u64) -> Result<LinearScm<f64>> {
    if d < 2 {
        return Err(IgrError::InvalidInput("random SCMs need d ≥ 2".into()));
    }
    if n_envs < 2 {
        return Err(IgrError::InvalidInput("random SCMs need at least two environments".into()));
    }
    let p = d + 1;
    let y = d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..d).collect();
    labels.shuffle(&mut rng);
    let n_pre = rng.random_range(1..d);
    let (pre, post) = labels.split_at(n_pre);

    // parents[child] = list of parents
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); p];
    match regime {
        ScmRegime::BlockOrthogonal { block_size } => {
            let mut start = 0;
            while start < pre.len() {
                let size = rng.random_range(1..=block_size).min(pre.len() - start);
                let block = &pre[start..start + size];
                for (b, &child) in block.iter().enumerate() {
                    for &parent in &block[..b] {
                        if rng.random_bool(0.7) {
                            parents[child].push(parent);
                        }
                    }
                }
                start += size;
            }
            parents[y] = pre.to_vec();
        }
        ScmRegime::General | ScmRegime::NoAncestorIntervention => {
            for (b, &child) in pre.iter().enumerate() {
                for &parent in &pre[..b] {
                    if rng.random_bool(0.4) {
                        parents[child].push(parent);
                    }
                }
            }
            parents[y] = pre.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
            if parents[y].is_empty() {
                parents[y].push(pre[rng.random_range(0..pre.len())]);
            }
        }
    }
    for (b, &child) in post.iter().enumerate() {
        if b == 0 || rng.random_bool(0.8) {
            parents[child].push(y);
        }
        for &parent in pre.iter().chain(&post[..b]) {
            if rng.random_bool(0.3) {
                parents[child].push(parent);
            }
        }
    }

    let ancestors = ancestors_of(y, &parents);
    let intervened: Vec<bool> = (0..p)
        .map(|i| {
            i != y
                && match regime {
                    ScmRegime::NoAncestorIntervention => !ancestors[i],
                    _ => true,
                }
        })
        .collect();

    let mut shared = DMatrix::zeros(p, p);
    let mut shared_noise = DVector::from_element(p, 1.0);
    for i in 0..p {
        for &k in &parents[i] {
            shared[(i, k)] = draw_coef(&mut rng);
        }
        if i != y {
            shared_noise[i] = rng.random_range(0.5..=1.5);
        }
    }
    let order: Vec<usize> = pre.iter().copied().chain([y]).chain(post.iter().copied()).collect();
    let mut envs = Vec::with_capacity(n_envs);
    for e in 0..n_envs {
        let mut c = shared.clone();
        let mut s = shared_noise.clone();
        if e > 0 {
            for i in (0..p).filter(|&i| intervened[i]) {
                for &k in &parents[i] {
                    c[(i, k)] = draw_coef(&mut rng);
                }
                s[i] = rng.random_range(0.5..=1.5);
            }
        }
        let mut env = ScmEnvironment {
            id: format!("env{}", e + 1),
            coefficients: c,
            noise: s,
        };
        standardize_children(&mut env, &order, y);
        envs.push(env);
    }
    LinearScm::new(d, envs)
}

fn ancestors_of(node: usize, parents: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; parents.len()];
    let mut stack = parents[node].clone();
    while let Some(v) = stack.pop() {
        if !seen[v] {
            seen[v] = true;
            stack.extend(parents[v].iter().copied());
        }
    }
    seen
}

fn standardize_children(env: &mut ScmEnvironment<f64>, order: &[usize], y: usize) {
    let p = env.noise.len();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for &i in order {
        let mut row = DVector::<f64>::zeros(p);
        row[i] = env.noise[i];
        for k in 0..p {
            if env.coefficients[(i, k)] != 0.0 {
                row += l.row(k).transpose() * env.coefficients[(i, k)];
            }
        }
        if env.coefficients[(i, y)] != 0.0 {
            let sd = row.norm();
            row /= sd;
            env.noise[i] /= sd;
            for k in 0..p {
                env.coefficients[(i, k)] /= sd;
            }
        }
        l.set_row(i, &row.transpose());
    }
}
