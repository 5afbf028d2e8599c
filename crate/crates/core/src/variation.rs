//! Prediction variation `v(S)` and the per-variable invariance weights.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IgrError, Result};
use crate::linalg::{quad_form_restricted, solve_restricted};
use crate::moments::EnvMoments;
use crate::scalar::Scalar;
use crate::scm::ScmOracle;
use crate::subset::{binomial, subsets_up_to, IndexSet};

/// Refuse to enumerate more subsets than this when building a table.
pub const MAX_WEIGHT_SUBSETS: u128 = 50_000_000;

/// Scale on which weights are reported.
///
/// Tables always hold `v(S)`; the penalty uses its square root.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightConvention {
    Sqrt,
    #[default]
    Squared,
}

impl std::str::FromStr for WeightConvention {
    type Err = IgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(WeightConvention::Sqrt),
            "squared" => Ok(WeightConvention::Squared),
            other => Err(IgrError::InvalidInput(format!(
                "unknown weight convention {other:?} (expected sqrt or squared)"
            ))),
        }
    }
}

fn check_subset<T: Scalar>(m: &EnvMoments<T>, s: &IndexSet) -> Result<()> {
    match s.max() {
        Some(j) if j >= m.d() => Err(IgrError::DimensionMismatch(format!(
            "subset {s} outside [1, {}]",
            m.d()
        ))),
        _ => Ok(()),
    }
}

fn singular(s: &IndexSet, env: Option<usize>) -> IgrError {
    IgrError::Singular {
        subset: s.clone(),
        env,
    }
}

/// `v(S)` from its definition: the environment-averaged `Σ⁽ᵉ⁾_S`-norm of the
/// gap between per-environment and pooled restricted coefficients.
pub fn prediction_variation<T: Scalar>(m: &EnvMoments<T>, s: &IndexSet) -> Result<T> {
    check_subset(m, s)?;
    let idx = s.indices();
    let pooled = m.solve_on(None, idx).ok_or_else(|| singular(s, None))?;
    let mut total = T::zero();
    for e in 0..m.n_envs() {
        let b = m.solve_on(Some(e), idx).ok_or_else(|| singular(s, Some(e)))?;
        let gap: Vec<T> = b.iter().zip(&pooled).map(|(x, y)| x.sub_ref(y)).collect();
        total = total.add_ref(&quad_form_restricted(m.sigma(e), idx, &gap));
    }
    Ok(average(total, m.n_envs()))
}

/// `v(S)` through the pooled residual: with `g_e = u⁽ᵉ⁾_S − Σ⁽ᵉ⁾_S β^(S)`,
/// the average of `g_eᵀ (Σ⁽ᵉ⁾_S)⁻¹ g_e`.
pub fn prediction_variation_residual<T: Scalar>(m: &EnvMoments<T>, s: &IndexSet) -> Result<T> {
    check_subset(m, s)?;
    let idx = s.indices();
    let pooled = m.solve_on(None, idx).ok_or_else(|| singular(s, None))?;
    let mut total = T::zero();
    for e in 0..m.n_envs() {
        let sigma = m.sigma(e);
        let g: Vec<T> = idx
            .iter()
            .map(|&i| {
                let mut r = m.u(e)[i].clone();
                for (b, &j) in idx.iter().enumerate() {
                    r.sub_mul_assign(&sigma[(i, j)], &pooled[b]);
                }
                r
            })
            .collect();
        let rhs = crate::linalg::scatter(m.d(), idx, &g);
        let z = solve_restricted(sigma, &rhs, idx).ok_or_else(|| singular(s, Some(e)))?;
        for (a, b) in g.iter().zip(&z) {
            total.add_mul_assign(a, b);
        }
    }
    Ok(average(total, m.n_envs()))
}

/// `v(S)` as `mean_e u⁽ᵉ⁾ᵀβ^(e,S) − ūᵀβ^(S)`; one solve per environment and
/// no quadratic forms. `None` if some system is singular.
fn variation_by_fit_gain<T: Scalar>(m: &EnvMoments<T>, idx: &[usize]) -> Option<T> {
    let mut total = T::zero();
    for e in 0..m.n_envs() {
        let b = m.solve_on(Some(e), idx)?;
        for (k, &i) in idx.iter().enumerate() {
            total.add_mul_assign(&m.u(e)[i], &b[k]);
        }
    }
    let pooled = m.solve_on(None, idx)?;
    let mut gain = average(total, m.n_envs());
    for (k, &i) in idx.iter().enumerate() {
        gain.sub_mul_assign(&m.pooled_u()[i], &pooled[k]);
    }
    if !T::EXACT && gain.to_f64() < 0.0 {
        gain = T::zero();
    }
    Some(gain)
}

fn average<T: Scalar>(total: T, n: usize) -> T {
    total.div_ref(&T::from_i64(n as i64))
}

fn strictly_less<T: Scalar>(a: &T, b: &T) -> bool {
    if T::EXACT && a == b {
        return false;
    }
    a.to_f64() < b.to_f64()
}

/// `v(S)` for every subset with `1 ≤ |S| ≤ k`, in enumeration order.
/// Singular subsets hold `None`.
#[derive(Clone, Debug)]
pub struct VariationCache<T: Scalar> {
    k: usize,
    entries: Vec<(IndexSet, Option<T>)>,
    lookup: HashMap<IndexSet, usize>,
}

impl<T: Scalar> VariationCache<T> {
    pub fn build(m: &EnvMoments<T>, k: usize) -> Result<Self> {
        let d = m.d();
        if k == 0 || k > d {
            return Err(IgrError::InvalidInput(format!("budget k = {k} must lie in [1, {d}]")));
        }
        let count: u128 = (1..=k).map(|s| binomial(d, s)).sum();
        if count > MAX_WEIGHT_SUBSETS {
            return Err(IgrError::InvalidInput(format!(
                "{count} subsets for d = {d}, k = {k} exceeds the limit of {MAX_WEIGHT_SUBSETS}"
            )));
        }
        let subsets = subsets_up_to(d, k);
        let values: Vec<Option<T>> = subsets
            .par_iter()
            .map(|s| variation_by_fit_gain(m, s.indices()))
            .collect();
        let entries: Vec<(IndexSet, Option<T>)> = subsets.into_iter().zip(values).collect();
        let lookup = entries
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (s.clone(), i))
            .collect();
        Ok(VariationCache { k, entries, lookup })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[(IndexSet, Option<T>)] {
        &self.entries
    }

    /// `None` when `s` was not enumerated, `Some(None)` when it is singular.
    pub fn get(&self, s: &IndexSet) -> Option<Option<&T>> {
        self.lookup.get(s).map(|&i| self.entries[i].1.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-variable weights `w_k(j) = min { v(S) : j ∈ S, |S| ≤ k }`.
#[derive(Clone, Debug)]
pub struct WeightTable<T: Scalar> {
    k: usize,
    variation: Vec<T>,
    argmin_sets: Vec<IndexSet>,
    singular_skipped: Vec<usize>,
    convention: WeightConvention,
    cache: Option<VariationCache<T>>,
}

impl<T: Scalar> WeightTable<T> {
    /// A table from known `v` values, one per variable; each argmin is `{j}`.
    pub fn from_variation(variation: Vec<T>) -> Self {
        let d = variation.len();
        WeightTable {
            k: 1,
            argmin_sets: (0..d).map(|j| IndexSet::new([j])).collect(),
            singular_skipped: vec![0; d],
            variation,
            convention: WeightConvention::Squared,
            cache: None,
        }
    }

    pub fn with_convention(mut self, convention: WeightConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.variation.len()
    }

    /// Minimal `v(S)` per variable (the squared scale).
    pub fn variation(&self) -> &[T] {
        &self.variation
    }

    /// `sqrt(v)` per variable: the factor multiplying `γ|β_j|` in the penalty.
    pub fn penalty_factors(&self) -> Vec<f64> {
        self.variation.iter().map(|v| v.to_f64().max(0.0).sqrt()).collect()
    }

    /// Values on the table's reporting scale.
    pub fn reported(&self) -> Vec<f64> {
        match self.convention {
            WeightConvention::Squared => self.variation.iter().map(|v| v.to_f64()).collect(),
            WeightConvention::Sqrt => self.penalty_factors(),
        }
    }

    pub fn convention(&self) -> WeightConvention {
        self.convention
    }

    pub fn argmin_sets(&self) -> &[IndexSet] {
        &self.argmin_sets
    }

    /// Number of singular subsets skipped while minimizing for each variable.
    pub fn singular_skipped(&self) -> &[usize] {
        &self.singular_skipped
    }

    pub fn cache(&self) -> Option<&VariationCache<T>> {
        self.cache.as_ref()
    }

    pub fn to_f64(&self) -> WeightTable<f64> {
        WeightTable {
            k: self.k,
            variation: self.variation.iter().map(|v| v.to_f64()).collect(),
            argmin_sets: self.argmin_sets.clone(),
            singular_skipped: self.singular_skipped.clone(),
            convention: self.convention,
            cache: None,
        }
    }
}

pub fn weight_table<T: Scalar>(m: &EnvMoments<T>, k: usize) -> Result<WeightTable<T>> {
    let cache = VariationCache::build(m, k)?;
    weights_from_cache(m.d(), cache)
}

pub fn weights_from_cache<T: Scalar>(d: usize, cache: VariationCache<T>) -> Result<WeightTable<T>> {
    let mut best: Vec<Option<(T, IndexSet)>> = vec![None; d];
    let mut skipped = vec![0usize; d];
    for (s, v) in cache.entries() {
        for j in s.iter() {
            match v {
                None => skipped[j] += 1,
                Some(v) => {
                    let replace = match &best[j] {
                        None => true,
                        Some((b, _)) => strictly_less(v, b),
                    };
                    if replace {
                        best[j] = Some((v.clone(), s.clone()));
                    }
                }
            }
        }
    }
    let mut variation = Vec::with_capacity(d);
    let mut argmin_sets = Vec::with_capacity(d);
    for (j, b) in best.into_iter().enumerate() {
        let (v, s) = b.ok_or(IgrError::UndefinedWeight(j))?;
        variation.push(v);
        argmin_sets.push(s);
    }
    Ok(WeightTable {
        k: cache.k(),
        variation,
        argmin_sets,
        singular_skipped: skipped,
        convention: WeightConvention::Squared,
        cache: Some(cache),
    })
}

/// Smallest penalty level at which the population solution drops every
/// endogenous variable: `max_{j∈G} |pooled E[X_j ε]| / sqrt(w_k(j))`.
///
/// Infinite when some endogenous variable has zero weight, zero when there
/// are no endogenous variables.
pub fn gamma_star<T: Scalar>(oracle: &ScmOracle<T>, weights: &WeightTable<T>) -> Result<f64> {
    let d = oracle.moments.d();
    if weights.d() != d {
        return Err(IgrError::DimensionMismatch(format!(
            "weights for {} variables but the model has {d}",
            weights.d()
        )));
    }
    let scale = oracle.moments.mean_sq_y().map(|v| v.to_f64()).unwrap_or(1.0);
    let pooled = oracle.pooled_noise_cov();
    let mut out = 0.0f64;
    for j in oracle.endogenous.iter() {
        let w = &weights.variation()[j];
        if w.negligible(scale) {
            return Ok(f64::INFINITY);
        }
        out = out.max(pooled[j].to_f64().abs() / w.to_f64().sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Rational;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn q(n: i64, d: i64) -> Rational {
        Rational::from_ratio(n, d)
    }

    fn two_env() -> EnvMoments<Rational> {
        let s1 = DMatrix::from_row_slice(2, 2, &[q(1, 1), q(1, 3), q(1, 3), q(2, 1)]);
        let s2 = DMatrix::from_row_slice(2, 2, &[q(2, 1), q(-1, 2), q(-1, 2), q(1, 1)]);
        let u1 = DVector::from_vec(vec![q(1, 1), q(1, 2)]);
        let u2 = DVector::from_vec(vec![q(3, 1), q(-1, 4)]);
        EnvMoments::new(vec![s1, s2], vec![u1, u2]).unwrap()
    }

    #[test]
    fn three_formulas_agree_exactly() {
        let m = two_env();
        for s in subsets_up_to(2, 2) {
            let a = prediction_variation(&m, &s).unwrap();
            let b = prediction_variation_residual(&m, &s).unwrap();
            let c = variation_by_fit_gain(&m, s.indices()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
        // hand computation for S = {1}: coefficients 1 and 3/2, pooled 4/3
        let v = prediction_variation(&m, &IndexSet::new([0])).unwrap();
        assert_eq!(v, (q(1, 1) * q(1, 9) + q(2, 1) * q(1, 36)) / q(2, 1));
    }

    #[test]
    fn single_environment_has_no_variation() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = EnvMoments::new(vec![s], vec![DVector::from_vec(vec![0.4, -1.0])]).unwrap();
        let t = weight_table(&m, 2).unwrap();
        assert!(t.variation().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn first_minimizer_is_kept() {
        // identical environments: every subset has v = 0
        let s = DMatrix::<Rational>::identity(3, 3);
        let u = DVector::from_vec(vec![q(1, 1), q(2, 1), q(3, 1)]);
        let m = EnvMoments::new(vec![s.clone(), s], vec![u.clone(), u]).unwrap();
        let t = weight_table(&m, 2).unwrap();
        let shown: Vec<String> = t.argmin_sets().iter().map(|s| s.to_string()).collect();
        assert_eq!(shown, ["{1}", "{2}", "{3}"]);
        assert_eq!(t.cache().unwrap().len(), 6);
    }

    #[test]
    fn reported_scale_follows_convention() {
        let t = WeightTable::from_variation(vec![q(1, 4), q(0, 1)]);
        assert_eq!(t.reported(), vec![0.25, 0.0]);
        let t = t.with_convention(WeightConvention::Sqrt);
        assert_eq!(t.reported(), vec![0.5, 0.0]);
        assert_eq!(t.penalty_factors(), vec![0.5, 0.0]);
    }

    #[test]
    fn budget_is_validated() {
        let m = two_env();
        assert!(weight_table(&m, 0).is_err());
        assert!(weight_table(&m, 3).is_err());
    }

    fn random_spd(d: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_iterator(d, d, seed.iter().copied().cycle().take(d * d));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn arb_moments() -> impl Strategy<Value = EnvMoments<f64>> {
        (2usize..=5, 2usize..=3).prop_flat_map(|(d, e)| {
            (
                proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d * d), e),
                proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), e),
            )
                .prop_map(move |(mats, us)| {
                    let sigma = mats.iter().map(|s| random_spd(d, s)).collect();
                    let u = us.into_iter().map(DVector::from_vec).collect();
                    EnvMoments::new(sigma, u).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn direct_and_residual_forms_agree(m in arb_moments()) {
            for s in subsets_up_to(m.d(), m.d()) {
                let a = prediction_variation(&m, &s).unwrap();
                let b = prediction_variation_residual(&m, &s).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-12), "{a} vs {b}");
            }
        }

        #[test]
        fn weights_shrink_with_budget(m in arb_moments()) {
            let mut prev = weight_table(&m, 1).unwrap();
            for k in 2..=m.d() {
                let next = weight_table(&m, k).unwrap();
                for j in 0..m.d() {
                    prop_assert!(next.variation()[j] <= prev.variation()[j]);
                    prop_assert!(next.argmin_sets()[j].contains(j));
                    prop_assert!(next.argmin_sets()[j].len() <= k);
                }
                prev = next;
            }
        }

        #[test]
        fn single_weight_ignores_column_scale(m in arb_moments(), a in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0]) {
            let d = m.d();
            let j = d - 1;
            let mut scale = DVector::from_element(d, 1.0);
            scale[j] = a;
            let sigma = (0..m.n_envs())
                .map(|e| m.sigma(e).component_mul(&(&scale * scale.transpose())))
                .collect();
            let u = (0..m.n_envs()).map(|e| m.u(e).component_mul(&scale)).collect();
            let scaled = EnvMoments::new(sigma, u).unwrap();
            let w0 = weight_table(&m, 1).unwrap().variation()[j];
            let w1 = weight_table(&scaled, 1).unwrap().variation()[j];
            prop_assert!((w0 - w1).abs() <= 1e-9 * w0.max(1e-12));
        }
    }
}
