//! Exhaustive search for invariant sets and the maximum-invariance test.
//!
//! Two strategies share one entry point. When every moment is rational and
//! some environment has a diagonal covariance, that environment pins down the
//! only candidate coefficient `u_j / Σ_jj` for every subset, so invariance
//! reduces to integer row-sum identities in the other environments. These are
//! checked by a depth-first scan whose partial sums are pruned against the
//! largest and smallest amounts the remaining indices can still add. Anything
//! else falls back to solving every restricted system.

use std::collections::HashMap;

use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::error::{IgrError, Result};
use crate::linalg::scatter;
use crate::moments::EnvMoments;
use crate::scalar::{Rational, Scalar};
use crate::subset::IndexSet;

pub const DEFAULT_ENUMERATION_CAP: usize = 24;
pub const DEFAULT_INVARIANCE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumerateOptions {
    /// Largest admissible dimension for the plain scan. The pruned rational
    /// scan ignores it.
    pub cap: usize,
    /// Coefficient tolerance for inexact backends.
    pub tol: f64,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        EnumerateOptions { cap: DEFAULT_ENUMERATION_CAP, tol: DEFAULT_INVARIANCE_TOL }
    }
}

/// An invariant set with its common coefficients, listed in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSet<T> {
    pub set: IndexSet,
    pub beta: Vec<T>,
}

impl<T: Scalar> InvariantSet<T> {
    pub fn is_zero(&self, tol: f64) -> bool {
        self.beta.iter().all(|b| if T::EXACT { b.is_zero() } else { b.magnitude() <= tol })
    }
}

/// Nonempty invariant sets ordered by size and then lexicographically. Sets
/// whose coefficients vanish are kept.
pub fn enumerate_invariant_sets<T: Scalar>(m: &EnvMoments<T>, opts: &EnumerateOptions) -> Result<Vec<IndexSet>> {
    Ok(all_invariant_sets(m, opts)?
        .into_iter()
        .filter(|s| !s.set.is_empty())
        .map(|s| s.set)
        .collect())
}

/// Every invariant set including `∅` and sets whose coefficients vanish.
pub fn all_invariant_sets<T: Scalar>(m: &EnvMoments<T>, opts: &EnumerateOptions) -> Result<Vec<InvariantSet<T>>> {
    let mut found = match RowSumScan::try_new(m) {
        Some(scan) => scan.run(),
        None => {
            if m.d() > opts.cap.min(63) {
                return Err(IgrError::CapExceeded { d: m.d(), cap: opts.cap.min(63) });
            }
            plain_scan(m, opts.tol)?
        }
    };
    found.insert(0, InvariantSet { set: IndexSet::empty(), beta: Vec::new() });
    found.sort_by(|a, b| a.set.len().cmp(&b.set.len()).then_with(|| a.set.cmp(&b.set)));
    Ok(found)
}

fn plain_scan<T: Scalar>(m: &EnvMoments<T>, tol: f64) -> Result<Vec<InvariantSet<T>>> {
    let d = m.d();
    let hits: Result<Vec<Option<InvariantSet<T>>>> = (1u64..1u64 << d)
        .into_par_iter()
        .map(|mask| {
            let set = IndexSet::from_mask(mask);
            let idx = set.indices();
            let mut first: Option<Vec<T>> = None;
            for e in 0..m.n_envs() {
                let b = m
                    .solve_on(Some(e), idx)
                    .ok_or_else(|| IgrError::Singular { subset: set.clone(), env: Some(e) })?;
                match &first {
                    None => first = Some(b),
                    Some(f) if !coefficients_equal(f, &b, tol) => return Ok(None),
                    Some(_) => {}
                }
            }
            Ok(first.map(|beta| InvariantSet { set, beta }))
        })
        .collect();
    Ok(hits?.into_iter().flatten().collect())
}

fn coefficients_equal<T: Scalar>(a: &[T], b: &[T], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            if T::EXACT {
                x == y
            } else {
                (x.to_f64() - y.to_f64()).abs() <= tol
            }
        })
}

/// Integer form of `Σ^{(e)}_S β_ref,S = u^{(e)}_S` for the row-sum scan.
struct RowSumScan<T> {
    d: usize,
    rows: usize,
    /// `coef[r * d + j]`: contribution of index `j` to row `r = e * d + i`.
    coef: Vec<i128>,
    target: Vec<i128>,
    /// Sums of the positive and negative contributions of indices `≥ t` to
    /// row `r`, at `[r * (d + 1) + t]`.
    up: Vec<i128>,
    down: Vec<i128>,
    beta_ref: Vec<T>,
}

impl<T: Scalar> RowSumScan<T> {
    fn try_new(m: &EnvMoments<T>) -> Option<Self> {
        let d = m.d();
        if d == 0 || !m.positive_definite().iter().all(|&p| p) {
            return None;
        }
        let sigma: Vec<Vec<Rational>> = (0..m.n_envs())
            .map(|e| m.sigma(e).iter().map(|x| x.to_rational()).collect::<Option<Vec<_>>>())
            .collect::<Option<_>>()?;
        let u: Vec<Vec<Rational>> = (0..m.n_envs())
            .map(|e| m.u(e).iter().map(|x| x.to_rational()).collect::<Option<Vec<_>>>())
            .collect::<Option<_>>()?;
        // column-major storage: entry (i, j) sits at j * d + i
        let reference = (0..m.n_envs())
            .find(|&e| (0..d).all(|j| (0..d).all(|i| i == j || sigma[e][j * d + i].is_zero())))?;
        let beta_ref: Vec<Rational> = (0..d)
            .map(|j| &u[reference][j] / &sigma[reference][j * d + j])
            .collect();

        let others: Vec<usize> = (0..m.n_envs()).filter(|&e| e != reference).collect();
        let rows = others.len() * d;
        let mut coef_q = Vec::with_capacity(rows * d);
        let mut target_q = Vec::with_capacity(rows);
        for &e in &others {
            for i in 0..d {
                for j in 0..d {
                    coef_q.push(&sigma[e][j * d + i] * &beta_ref[j]);
                }
                target_q.push(u[e][i].clone());
            }
        }
        let scale = coef_q
            .iter()
            .chain(&target_q)
            .fold(num_bigint::BigInt::one(), |acc, q| acc.lcm(q.denom()));
        let to_int = |q: &Rational| (q.numer() * (&scale / q.denom())).to_i128();
        let coef: Vec<i128> = coef_q.iter().map(to_int).collect::<Option<_>>()?;
        let target: Vec<i128> = target_q.iter().map(to_int).collect::<Option<_>>()?;
        // partial sums must stay far from overflow
        let limit = i128::MAX / (4 * (d as i128 + 1));
        if coef.iter().chain(&target).any(|v| v.abs() > limit) {
            return None;
        }
        let mut up = vec![0i128; rows * (d + 1)];
        let mut down = vec![0i128; rows * (d + 1)];
        for r in 0..rows {
            for t in (0..d).rev() {
                let c = coef[r * d + t];
                up[r * (d + 1) + t] = up[r * (d + 1) + t + 1] + c.max(0);
                down[r * (d + 1) + t] = down[r * (d + 1) + t + 1] + c.min(0);
            }
        }
        Some(RowSumScan {
            d,
            rows,
            coef,
            target,
            up,
            down,
            beta_ref: beta_ref.iter().map(T::from_rational).collect(),
        })
    }

    fn run(&self) -> Vec<InvariantSet<T>> {
        (0..self.d)
            .into_par_iter()
            .flat_map_iter(|first| {
                let mut out = Vec::new();
                let mut stack = Vec::with_capacity(self.d);
                let mut acc = vec![0i128; self.rows];
                self.visit(first, &mut stack, &mut acc, &mut out);
                out
            })
            .collect()
    }

    fn visit(&self, j: usize, stack: &mut Vec<usize>, acc: &mut [i128], out: &mut Vec<InvariantSet<T>>) {
        let d = self.d;
        for (r, a) in acc.iter_mut().enumerate() {
            *a += self.coef[r * d + j];
        }
        stack.push(j);
        let mut exact = true;
        let mut feasible = true;
        'rows: for r0 in (0..self.rows).step_by(d) {
            for &i in stack.iter() {
                let r = r0 + i;
                let gap = self.target[r] - acc[r];
                if gap != 0 {
                    exact = false;
                    let t = r * (d + 1) + j + 1;
                    if gap > self.up[t] || gap < self.down[t] {
                        feasible = false;
                        break 'rows;
                    }
                }
            }
        }
        if feasible {
            if exact {
                let set = IndexSet::new(stack.iter().copied());
                let beta = set.iter().map(|i| self.beta_ref[i].clone()).collect();
                out.push(InvariantSet { set, beta });
            }
            for next in j + 1..d {
                self.visit(next, stack, acc, out);
            }
        }
        stack.pop();
        for (r, a) in acc.iter_mut().enumerate() {
            *a -= self.coef[r * d + j];
        }
    }
}

/// Whether `s_bar` is invariant and, for every `S`, either
/// `β^{(S ∪ S̄)} = β^{(S̄)}` or the environments disagree on `S`.
pub fn is_maximum_invariant_set<T: Scalar>(m: &EnvMoments<T>, s_bar: &IndexSet, opts: &EnumerateOptions) -> Result<bool> {
    let all = all_invariant_sets(m, opts)?;
    maximum_test(m, s_bar, &all, opts.tol)
}

/// All maximum invariant sets, `∅` included when it qualifies.
pub fn maximum_invariant_sets<T: Scalar>(m: &EnvMoments<T>, opts: &EnumerateOptions) -> Result<Vec<IndexSet>> {
    let all = all_invariant_sets(m, opts)?;
    let mut out = Vec::new();
    for cand in &all {
        if maximum_test(m, &cand.set, &all, opts.tol)? {
            out.push(cand.set.clone());
        }
    }
    Ok(out)
}

// Only invariant S can violate the condition, so those are the only ones
// examined.
fn maximum_test<T: Scalar>(m: &EnvMoments<T>, s_bar: &IndexSet, all: &[InvariantSet<T>], tol: f64) -> Result<bool> {
    let d = m.d();
    if s_bar.max().is_some_and(|j| j >= d) {
        return Err(IgrError::DimensionMismatch(format!("{s_bar} outside [1, {d}]")));
    }
    let lookup: HashMap<&IndexSet, &Vec<T>> = all.iter().map(|s| (&s.set, &s.beta)).collect();
    let Some(beta_bar) = lookup.get(s_bar) else {
        return Ok(false);
    };
    let beta_bar = scatter(d, s_bar.indices(), beta_bar);
    for s in all {
        let union = s.set.union(s_bar);
        let beta_union = match lookup.get(&union) {
            Some(b) => scatter(d, union.indices(), b),
            None => {
                let b = m
                    .solve_on(None, union.indices())
                    .ok_or_else(|| IgrError::Singular { subset: union.clone(), env: None })?;
                scatter(d, union.indices(), &b)
            }
        };
        if !coefficients_equal(beta_union.as_slice(), beta_bar.as_slice(), tol) {
            return Ok(false);
        }
    }
    Ok(true)
}
