//! Separation gaps of reduced instances, evaluated exactly for every subset.
//!
//! With `Σ` and `u` scaled to integers, every quadratic form
//! `aᵀ Σ_S⁻¹ b` is `aᵀ adj(Σ_S) b / det Σ_S` with an integer numerator. Both
//! integers are tracked modulo several 62-bit primes by extending an `LDLᵀ`
//! factorization one index at a time along a depth-first walk of the subset
//! lattice, then rebuilt by Chinese remaindering. A Hadamard bound fixes how
//! many primes are needed, so the reconstructed values are exact.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use super::invariance::{all_invariant_sets, EnumerateOptions, InvariantSet};
use super::reduction::{LisInstance, Provenance};
use crate::error::{IgrError, Result};
use crate::linalg::{eigen_range, rational_definiteness, solve_restricted, to_f64_matrix, Definiteness};
use crate::scalar::{format_rational, Rational};
use crate::subset::IndexSet;

const MAX_VIOLATIONS: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct SeparationReport {
    pub d: usize,
    /// Subsets visited, `∅` included.
    pub subsets: u64,
    /// Invariant sets used as reference solutions, `∅` included.
    pub invariant_sets: usize,
    /// `E|Y^{(e)}|² = u^{(e)ᵀ}(Σ^{(e)})⁻¹u^{(e)}` as exact fractions.
    pub second_moments: Vec<String>,
    pub first_second_moment_is_d: bool,
    pub second_moment_sum_within_bound: bool,
    pub eigenvalue_bounds_hold: bool,
    pub eigenvalue_range: (f64, f64),
    pub heterogeneity_in_range: bool,
    pub distance_in_range: bool,
    pub zero_heterogeneity_sets: u64,
    pub min_positive_heterogeneity: Option<f64>,
    pub max_heterogeneity: f64,
    pub min_distance: Option<f64>,
    pub max_distance: f64,
    pub violations: Vec<String>,
}

impl SeparationReport {
    pub fn all_hold(&self) -> bool {
        self.first_second_moment_is_d
            && self.second_moment_sum_within_bound
            && self.eigenvalue_bounds_hold
            && self.heterogeneity_in_range
            && self.distance_in_range
            && self.zero_heterogeneity_sets == self.invariant_sets as u64
    }
}

/// Checks, for every `S ⊆ [d]` and every invariant `S†`,
///
/// * `Σ_e ‖β^{(S)} − β^{(e,S)}‖²_{Σ^{(e)}} / Σ_e E|Y^{(e)}|² ∈ {0} ∪ [(10d)⁻⁴, 1]`
/// * `‖β^{(S)} − β^{(S†)}‖²_Σ / Σ_e E|Y^{(e)}|² ∈ [1{S ≠ S†}(40d)⁻¹, 1]`
///
/// together with `4d ≤ λ(Σ^{(2)}) ≤ 6d`, `E|Y^{(1)}|² = d` and
/// `Σ_e E|Y^{(e)}|² ≤ 10d²`, where `Y^{(e)}` is the noiseless response
/// `(β^{(e,[d])})ᵀX^{(e)}`.
pub fn separation_diagnostics(inst: &LisInstance, cap: usize) -> Result<SeparationReport> {
    if !matches!(inst.provenance(), Provenance::ReducedFromCnf { .. }) || inst.n_envs() != 2 {
        return Err(IgrError::InvalidInput("separation diagnostics need a reduced instance".into()));
    }
    let d = inst.d();
    if d > cap.min(63) {
        return Err(IgrError::CapExceeded { d, cap: cap.min(63) });
    }
    let bounds = moment_bounds(inst)?;
    let m = inst.moments();
    let total = bounds.total.clone();

    let refs = all_invariant_sets(m, &EnumerateOptions { cap, ..Default::default() })?;
    let problem = ExactProblem::build(inst, &refs, &total)?;
    let mut acc = (0..d)
        .into_par_iter()
        .map(|first| {
            let mut walker = Walker::new(&problem);
            let mut tally = Tally::default();
            walker.visit(first, &mut tally)?;
            Ok(tally)
        })
        .collect::<Result<Vec<Tally>>>()?
        .into_iter()
        .fold(Tally::default(), Tally::merge);
    acc.absorb_empty_set(&problem);

    Ok(SeparationReport {
        d,
        subsets: acc.subsets,
        invariant_sets: refs.len(),
        second_moments: bounds.second_moments,
        first_second_moment_is_d: bounds.first_second_moment_is_d,
        second_moment_sum_within_bound: bounds.second_moment_sum_within_bound,
        eigenvalue_bounds_hold: bounds.eigenvalue_bounds_hold,
        eigenvalue_range: bounds.eigenvalue_range,
        heterogeneity_in_range: acc.heterogeneity_ok,
        distance_in_range: acc.distance_ok,
        zero_heterogeneity_sets: acc.zero_heterogeneity,
        min_positive_heterogeneity: acc.min_het,
        max_heterogeneity: acc.max_het,
        min_distance: acc.min_dist,
        max_distance: acc.max_dist,
        violations: acc.violations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentBounds {
    pub d: usize,
    /// `E|Y^{(e)}|²` of the noiseless response, as exact fractions.
    pub second_moments: Vec<String>,
    pub first_second_moment_is_d: bool,
    /// `Σ_e E|Y^{(e)}|² ≤ 10d²`
    pub second_moment_sum_within_bound: bool,
    /// `4d ≤ λ_min(Σ^{(2)}) ≤ λ_max(Σ^{(2)}) ≤ 6d`, decided exactly.
    pub eigenvalue_bounds_hold: bool,
    /// Floating-point estimate of the spectrum's extremes.
    pub eigenvalue_range: (f64, f64),
    #[serde(skip)]
    total: Rational,
}

impl MomentBounds {
    pub fn all_hold(&self) -> bool {
        self.first_second_moment_is_d && self.second_moment_sum_within_bound && self.eigenvalue_bounds_hold
    }
}

/// Spectrum and second-moment bounds of a reduced instance; no subset walk.
pub fn moment_bounds(inst: &LisInstance) -> Result<MomentBounds> {
    if !matches!(inst.provenance(), Provenance::ReducedFromCnf { .. }) || inst.n_envs() != 2 {
        return Err(IgrError::InvalidInput("moment bounds need a reduced instance".into()));
    }
    let d = inst.d();
    let m = inst.moments();
    let d_q = Rational::from_integer(d.into());

    let full: Vec<usize> = (0..d).collect();
    let mut second = Vec::with_capacity(m.n_envs());
    for e in 0..m.n_envs() {
        let b = solve_restricted(m.sigma(e), m.u(e), &full)
            .ok_or_else(|| IgrError::Singular { subset: IndexSet::full(d), env: Some(e) })?;
        second.push(b.iter().zip(m.u(e).iter()).map(|(x, y)| x * y).sum::<Rational>());
    }
    let total: Rational = second.iter().sum();

    let sigma2 = m.sigma(1);
    let shifted = |c: i64, sign: i64| {
        let mut a = sigma2.map(|x| x * Rational::from_integer(sign.into()));
        for i in 0..d {
            a[(i, i)] += Rational::from_integer((c * d as i64).into());
        }
        a
    };
    let psd = |a: nalgebra::DMatrix<Rational>| rational_definiteness(&a) != Definiteness::Indefinite;

    Ok(MomentBounds {
        d,
        first_second_moment_is_d: second[0] == d_q,
        second_moment_sum_within_bound: total <= &d_q * &d_q * Rational::from_integer(10.into()),
        eigenvalue_bounds_hold: psd(shifted(-4, 1)) && psd(shifted(6, -1)),
        eigenvalue_range: eigen_range(&to_f64_matrix(sigma2)),
        second_moments: second.iter().map(format_rational).collect(),
        total,
    })
}

/// Montgomery arithmetic modulo an odd prime below 2⁶².
#[derive(Clone, Copy, Debug)]
struct Mont {
    p: u64,
    /// `−p⁻¹ mod 2⁶⁴`
    ninv: u64,
    /// `2¹²⁸ mod p`
    r2: u64,
}

impl Mont {
    fn new(p: u64) -> Self {
        let mut inv = p;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(p.wrapping_mul(inv)));
        }
        let r = ((1u128 << 64) % p as u128) as u64;
        let r2 = ((r as u128 * r as u128) % p as u128) as u64;
        Mont { p, ninv: inv.wrapping_neg(), r2 }
    }

    #[inline]
    fn redc(&self, t: u128) -> u64 {
        let m = (t as u64).wrapping_mul(self.ninv);
        let u = ((t + m as u128 * self.p as u128) >> 64) as u64;
        if u >= self.p {
            u - self.p
        } else {
            u
        }
    }

    #[inline]
    fn mul(&self, a: u64, b: u64) -> u64 {
        self.redc(a as u128 * b as u128)
    }

    #[inline]
    fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    #[inline]
    fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    fn enter(&self, x: &BigInt) -> u64 {
        let r = x.mod_floor(&BigInt::from(self.p)).to_u64().expect("reduced residue");
        self.mul(r, self.r2)
    }

    fn leave(&self, a: u64) -> u64 {
        self.redc(a as u128)
    }

    fn one(&self) -> u64 {
        self.mul(1, self.r2)
    }

    fn inv(&self, a: u64) -> u64 {
        let mut e = self.p - 2;
        let mut base = a;
        let mut acc = self.one();
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % p == 0 {
            return n == p;
        }
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mulmod(r, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        r
    };
    let s = (n - 1).trailing_zeros();
    let odd = (n - 1) >> s;
    // these bases are a deterministic witness set for all 64-bit integers
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, odd);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn primes_below_2_62(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut n = (1u64 << 62) - 1;
    while out.len() < count {
        if is_prime(n) {
            out.push(n);
        }
        n -= 2;
    }
    out
}

/// One integer matrix and the vectors whose bilinear forms against its
/// inverse are wanted. The first vector is the left factor of every form.
struct IntSystem {
    matrix: Vec<BigInt>,
    vectors: Vec<Vec<BigInt>>,
    diagonal: bool,
}

impl IntSystem {
    fn log2_bound(&self, d: usize) -> f64 {
        let row = |i: usize| {
            let mut s: f64 = (0..d).map(|j| self.matrix[i * d + j].to_f64().unwrap().powi(2)).sum();
            s += self.vectors[1..].iter().map(|v| v[i].to_f64().unwrap().powi(2)).sum::<f64>();
            s.sqrt().max(1.0).log2()
        };
        let left: f64 = self.vectors[0].iter().map(|x| x.to_f64().unwrap().powi(2)).sum();
        (0..d).map(row).sum::<f64>() + left.sqrt().max(1.0).log2()
    }
}

/// Integer data, reference solutions and normalisation of one instance.
struct ExactProblem {
    d: usize,
    n_env: usize,
    /// Systems `0..n_env` are the environments, the last one is pooled.
    systems: Vec<IntSystem>,
    primes: Vec<Mont>,
    /// `garner[i][j] = p_i⁻¹ mod p_j` for `i < j`.
    garner: Vec<Vec<u64>>,
    modulus: BigInt,
    /// Common scale of all moments.
    scale: BigInt,
    /// Scale of the pooled products `Σ β†`.
    ref_scale: BigInt,
    /// Reference sets with `c = β†ᵀΣβ†` as numerator and denominator.
    refs: Vec<(IndexSet, BigInt, BigInt)>,
    total: Rational,
    het_floor: BigInt,
    dist_floor: BigInt,
}

impl ExactProblem {
    fn build(inst: &LisInstance, refs: &[InvariantSet<Rational>], total: &Rational) -> Result<Self> {
        let m = inst.moments();
        let d = m.d();
        let n_env = m.n_envs();
        let mut mats: Vec<Vec<Rational>> = (0..n_env)
            .map(|e| row_major(m.sigma(e), d))
            .collect();
        mats.push(row_major(m.pooled_sigma(), d));
        let mut lefts: Vec<Vec<Rational>> = (0..n_env).map(|e| m.u(e).iter().cloned().collect()).collect();
        lefts.push(m.pooled_u().iter().cloned().collect());

        let scale = mats
            .iter()
            .flatten()
            .chain(lefts.iter().flatten())
            .fold(BigInt::one(), |acc, q| acc.lcm(q.denom()));

        // pooled Σβ† and β†ᵀΣβ† for every reference
        let pooled = &mats[n_env];
        let mut products = Vec::new();
        let mut ref_info = Vec::new();
        for r in refs {
            let beta = {
                let mut b = vec![Rational::zero(); d];
                for (k, j) in r.set.iter().enumerate() {
                    b[j] = r.beta[k].clone();
                }
                b
            };
            let w: Vec<Rational> = (0..d)
                .map(|i| (0..d).map(|j| &pooled[i * d + j] * &beta[j]).sum())
                .collect();
            let c: Rational = beta.iter().zip(&w).map(|(x, y)| x * y).sum();
            ref_info.push((r.set.clone(), c.numer().clone(), c.denom().clone()));
            if !r.set.is_empty() {
                products.push(w);
            }
        }
        let ref_scale = products.iter().flatten().fold(BigInt::one(), |acc, q| acc.lcm(q.denom()));
        let to_int = |q: &Rational, s: &BigInt| q.numer() * (s / q.denom());

        let mut systems = Vec::with_capacity(n_env + 1);
        for (a, mat) in mats.iter().enumerate() {
            let mut vectors = vec![lefts[a].iter().map(|q| to_int(q, &scale)).collect::<Vec<_>>()];
            if a == n_env {
                for w in &products {
                    vectors.push(w.iter().map(|q| to_int(q, &ref_scale)).collect());
                }
            }
            let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || mat[i * d + j].is_zero()));
            systems.push(IntSystem { matrix: mat.iter().map(|q| to_int(q, &scale)).collect(), vectors, diagonal });
        }

        let bits = systems.iter().map(|s| s.log2_bound(d)).fold(0.0, f64::max);
        // one bit for the sign, one of slack
        let n_primes = ((bits + 2.0) / 61.0).ceil().max(1.0) as usize;
        let raw = primes_below_2_62(n_primes);
        let modulus = raw.iter().fold(BigInt::one(), |acc, &p| acc * p);
        let garner = (0..n_primes)
            .map(|i| {
                (0..n_primes)
                    .map(|j| {
                        let mt = Mont::new(raw[j]);
                        if i < j {
                            mt.leave(mt.inv(mt.enter(&BigInt::from(raw[i]))))
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        let dq = BigInt::from(d);
        Ok(ExactProblem {
            d,
            n_env,
            systems,
            primes: raw.into_iter().map(Mont::new).collect(),
            garner,
            modulus,
            scale,
            ref_scale,
            refs: ref_info,
            total: total.clone(),
            het_floor: (BigInt::from(10) * &dq).pow(4),
            dist_floor: BigInt::from(40) * &dq,
        })
    }

    /// Signed integer from its residues.
    fn reconstruct(&self, residues: &[u64]) -> BigInt {
        let n = residues.len();
        let mut digits = Vec::with_capacity(n);
        for j in 0..n {
            let p = self.primes[j].p as u128;
            let mut x = residues[j] as u128;
            for (i, &a) in digits.iter().enumerate() {
                let diff = (x + p - (a as u128 % p)) % p;
                x = diff * self.garner[i][j] as u128 % p;
            }
            digits.push(x as u64);
        }
        let mut value = BigInt::zero();
        for j in (0..n).rev() {
            value = value * self.primes[j].p + digits[j];
        }
        if &value * 2 > self.modulus {
            value - &self.modulus
        } else {
            value
        }
    }
}

fn row_major(m: &nalgebra::DMatrix<Rational>, d: usize) -> Vec<Rational> {
    (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].clone()).collect()
}

/// `LDLᵀ` of one system modulo one prime, grown one index per level.
#[derive(Clone)]
struct Factor {
    mont: Mont,
    d: usize,
    n_vec: usize,
    diagonal: bool,
    matrix: Vec<u64>,
    vectors: Vec<u64>,
    idx: Vec<usize>,
    lower: Vec<u64>,
    w: Vec<u64>,
    dinv: Vec<u64>,
    det: Vec<u64>,
    y: Vec<u64>,
    forms: Vec<u64>,
}

impl Factor {
    fn new(sys: &IntSystem, mont: Mont, d: usize) -> Self {
        let n_vec = sys.vectors.len();
        let mut vectors = vec![0; d * n_vec];
        for (v, vec) in sys.vectors.iter().enumerate() {
            for j in 0..d {
                vectors[j * n_vec + v] = mont.enter(&vec[j]);
            }
        }
        Factor {
            mont,
            d,
            n_vec,
            diagonal: sys.diagonal,
            matrix: sys.matrix.iter().map(|x| mont.enter(x)).collect(),
            vectors,
            idx: vec![0; d],
            lower: vec![0; d * d],
            w: vec![0; d],
            dinv: vec![0; d],
            det: vec![0; d],
            y: vec![0; d * n_vec],
            forms: vec![0; d * n_vec],
        }
    }

    /// Appends index `j` at `level`; false on a zero pivot.
    fn push(&mut self, level: usize, j: usize) -> bool {
        let mt = self.mont;
        let d = self.d;
        self.idx[level] = j;
        let row = &self.matrix[j * d..(j + 1) * d];
        let mut pivot = row[j];
        if !self.diagonal {
            for k in 0..level {
                let mut t = row[self.idx[k]];
                let lk = &self.lower[k * d..k * d + k];
                for (m, &l) in lk.iter().enumerate() {
                    t = mt.sub(t, mt.mul(self.w[m], l));
                }
                self.w[k] = t;
            }
            for k in 0..level {
                let l = mt.mul(self.w[k], self.dinv[k]);
                self.lower[level * d + k] = l;
                pivot = mt.sub(pivot, mt.mul(self.w[k], l));
            }
        }
        if pivot == 0 {
            return false;
        }
        let dinv = mt.inv(pivot);
        self.dinv[level] = dinv;
        self.det[level] = if level == 0 { pivot } else { mt.mul(self.det[level - 1], pivot) };
        let nv = self.n_vec;
        for v in 0..nv {
            let mut t = self.vectors[j * nv + v];
            if !self.diagonal {
                for k in 0..level {
                    t = mt.sub(t, mt.mul(self.lower[level * d + k], self.y[k * nv + v]));
                }
            }
            self.y[level * nv + v] = t;
        }
        let y0 = mt.mul(self.y[level * nv], dinv);
        for v in 0..nv {
            let term = mt.mul(y0, self.y[level * nv + v]);
            let prev = if level == 0 { 0 } else { self.forms[(level - 1) * nv + v] };
            self.forms[level * nv + v] = mt.add(prev, term);
        }
        true
    }

    /// Residues of `det` and of `det · form_v` at `level`, outside Montgomery form.
    fn residues(&self, level: usize, out_det: &mut u64, out_forms: &mut [u64]) {
        let mt = self.mont;
        let det = self.det[level];
        *out_det = mt.leave(det);
        for (v, o) in out_forms.iter_mut().enumerate() {
            *o = mt.leave(mt.mul(det, self.forms[level * self.n_vec + v]));
        }
    }
}

struct Walker<'a> {
    problem: &'a ExactProblem,
    /// `factors[prime][system]`
    factors: Vec<Vec<Factor>>,
    stack: Vec<usize>,
}

impl<'a> Walker<'a> {
    fn new(problem: &'a ExactProblem) -> Self {
        let factors = problem
            .primes
            .iter()
            .map(|&mt| problem.systems.iter().map(|s| Factor::new(s, mt, problem.d)).collect())
            .collect();
        Walker { problem, factors, stack: Vec::with_capacity(problem.d) }
    }

    fn visit(&mut self, j: usize, tally: &mut Tally) -> Result<()> {
        let level = self.stack.len();
        self.stack.push(j);
        for fs in &mut self.factors {
            for f in fs.iter_mut() {
                if !f.push(level, j) {
                    let set = IndexSet::new(self.stack.iter().copied());
                    return Err(IgrError::NotPositiveDefinite(format!(
                        "zero pivot modulo {} on {set}",
                        f.mont.p
                    )));
                }
            }
        }
        self.evaluate(level, tally);
        for next in j + 1..self.problem.d {
            self.visit(next, tally)?;
        }
        self.stack.pop();
        Ok(())
    }

    fn evaluate(&self, level: usize, tally: &mut Tally) {
        let pr = self.problem;
        let n_sys = pr.systems.len();
        let n_p = pr.primes.len();
        let mut dets = Vec::with_capacity(n_sys);
        let mut forms: Vec<Vec<BigInt>> = Vec::with_capacity(n_sys);
        let mut det_res = vec![0u64; n_p];
        for s in 0..n_sys {
            let nv = pr.systems[s].vectors.len();
            let mut form_res = vec![vec![0u64; n_p]; nv];
            let mut buf = vec![0u64; nv];
            for p in 0..n_p {
                self.factors[p][s].residues(level, &mut det_res[p], &mut buf);
                for v in 0..nv {
                    form_res[v][p] = buf[v];
                }
            }
            dets.push(pr.reconstruct(&det_res));
            forms.push(form_res.iter().map(|r| pr.reconstruct(r)).collect());
        }
        let set = IndexSet::new(self.stack.iter().copied());
        tally.record(pr, &set, &dets, &forms);
    }
}

#[derive(Default)]
struct Tally {
    subsets: u64,
    heterogeneity_ok: bool,
    distance_ok: bool,
    zero_heterogeneity: u64,
    min_het: Option<f64>,
    max_het: f64,
    min_dist: Option<f64>,
    max_dist: f64,
    violations: Vec<String>,
    started: bool,
}

enum Placement {
    Zero,
    Inside,
    Outside,
}

/// Where `num/den` (den > 0) sits relative to `{0} ∪ [1/floor, 1]` when
/// `zero_allowed`, else `[1/floor, 1]`.
fn place(num: &BigInt, den: &BigInt, floor: &BigInt, zero_allowed: bool) -> Placement {
    if num.is_zero() && zero_allowed {
        return Placement::Zero;
    }
    if num.is_negative() || num > den || &(num * floor) < den {
        return Placement::Outside;
    }
    Placement::Inside
}

fn ratio(num: &BigInt, den: &BigInt) -> f64 {
    crate::scalar::ratio_to_f64(&Rational::new_raw(num.clone(), den.clone()))
}

impl Tally {
    fn ensure_started(&mut self) {
        if !self.started {
            self.started = true;
            self.heterogeneity_ok = true;
            self.distance_ok = true;
        }
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(msg);
        }
    }

    fn record(&mut self, pr: &ExactProblem, set: &IndexSet, dets: &[BigInt], forms: &[Vec<BigInt>]) {
        self.ensure_started();
        self.subsets += 1;
        let (tn, td) = (pr.total.numer(), pr.total.denom());
        let e = pr.n_env;
        let pooled_det = &dets[e];

        // Σ_e q_e − E q̄, over the common denominator Π det
        let all_det: BigInt = dets.iter().product();
        let mut num = BigInt::zero();
        for a in 0..e {
            let others: BigInt = dets.iter().enumerate().filter(|(b, _)| *b != a).map(|(_, x)| x).product();
            num += &forms[a][0] * others;
        }
        let others_pooled: BigInt = dets[..e].iter().product();
        num -= BigInt::from(e) * &forms[e][0] * others_pooled;
        let hn = &num * td;
        let hd = &pr.scale * &all_det * tn;
        match place(&hn, &hd, &pr.het_floor, true) {
            Placement::Zero => self.zero_heterogeneity += 1,
            Placement::Inside => {
                let v = ratio(&hn, &hd);
                self.min_het = Some(self.min_het.map_or(v, |m| m.min(v)));
                self.max_het = self.max_het.max(v);
            }
            Placement::Outside => {
                self.heterogeneity_ok = false;
                self.violation(format!("heterogeneity of {set} is {:.3e}", ratio(&hn, &hd)));
            }
        }

        // ‖β^{(S)} − β†‖²_Σ = q̄ − 2b + c with q̄ = N_q/(L·det), b = N_b/(L_w·det)
        let base = &pr.ref_scale * &forms[e][0];
        let den0 = &pr.scale * &pr.ref_scale * pooled_det;
        let mut vec_index = 1;
        for (ref_set, cn, cd) in &pr.refs {
            let b = if ref_set.is_empty() {
                BigInt::zero()
            } else {
                let b = forms[e][vec_index].clone();
                vec_index += 1;
                b
            };
            let num = (&base - b * &pr.scale * 2) * cd + cn * &den0;
            let dn = num * td;
            let dd = &den0 * cd * tn;
            self.record_distance(set, ref_set, &dn, &dd, &pr.dist_floor);
        }
    }

    fn record_distance(&mut self, set: &IndexSet, ref_set: &IndexSet, dn: &BigInt, dd: &BigInt, floor: &BigInt) {
        if set == ref_set {
            if !dn.is_zero() {
                self.distance_ok = false;
                self.violation(format!("{set} differs from its own coefficients"));
            }
            return;
        }
        match place(dn, dd, floor, false) {
            Placement::Inside => {
                let v = ratio(dn, dd);
                self.min_dist = Some(self.min_dist.map_or(v, |m| m.min(v)));
                self.max_dist = self.max_dist.max(v);
            }
            _ => {
                self.distance_ok = false;
                self.violation(format!("distance from {set} to {ref_set} is {:.3e}", ratio(dn, dd)));
            }
        }
    }

    /// `∅` has zero heterogeneity and `β = 0`.
    fn absorb_empty_set(&mut self, pr: &ExactProblem) {
        self.ensure_started();
        self.subsets += 1;
        self.zero_heterogeneity += 1;
        let (tn, td) = (pr.total.numer(), pr.total.denom());
        let empty = IndexSet::empty();
        for (ref_set, cn, cd) in &pr.refs {
            let dn = cn * td;
            let dd = cd * tn;
            self.record_distance(&empty, ref_set, &dn, &dd, &pr.dist_floor);
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        if !other.started {
            return self;
        }
        if !self.started {
            return other;
        }
        self.subsets += other.subsets;
        self.heterogeneity_ok &= other.heterogeneity_ok;
        self.distance_ok &= other.distance_ok;
        self.zero_heterogeneity += other.zero_heterogeneity;
        self.min_het = match (self.min_het, other.min_het) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max_het = self.max_het.max(other.max_het);
        self.min_dist = match (self.min_dist, other.min_dist) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max_dist = self.max_dist.max(other.max_dist);
        for v in other.violations {
            self.violation(v);
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::cnf::{parse_dimacs, CnfFormula};
    use crate::lab::reduction::reduce_3sat;
    use crate::linalg::solve_restricted;

    #[test]
    fn montgomery_matches_plain_arithmetic() {
        let p = primes_below_2_62(1)[0];
        let mt = Mont::new(p);
        let a = BigInt::from(123456789012345u64);
        let b = BigInt::from(-987654321i64);
        let prod = mt.leave(mt.mul(mt.enter(&a), mt.enter(&b)));
        let expect = (&a * &b).mod_floor(&BigInt::from(p)).to_u64().unwrap();
        assert_eq!(prod, expect);
        let x = mt.enter(&a);
        assert_eq!(mt.leave(mt.mul(x, mt.inv(x))), 1);
    }

    #[test]
    fn prime_search() {
        assert!(is_prime(2_305_843_009_213_693_951)); // 2^61 - 1
        assert!(!is_prime(2_305_843_009_213_693_953));
        let ps = primes_below_2_62(3);
        assert!(ps.windows(2).all(|w| w[0] > w[1]));
        assert!(ps.iter().all(|&p| p < 1 << 62 && is_prime(p)));
    }

    #[test]
    fn reconstruction_recovers_signed_values() {
        let inst = reduce_3sat(&parse_dimacs("p cnf 3 1\n1 2 3 0").unwrap());
        let refs = all_invariant_sets(inst.moments(), &EnumerateOptions::default()).unwrap();
        let total = Rational::one();
        let pr = ExactProblem::build(&inst, &refs, &total).unwrap();
        for v in [BigInt::from(-5), BigInt::from(7) * BigInt::from(u64::MAX), BigInt::zero()] {
            let residues: Vec<u64> = pr.primes.iter().map(|m| v.mod_floor(&BigInt::from(m.p)).to_u64().unwrap()).collect();
            assert_eq!(pr.reconstruct(&residues), v);
        }
    }

    #[test]
    fn modular_forms_match_rational_solves() {
        let f = parse_dimacs("p cnf 3 2\n1 2 3 0\n-1 2 -3 0").unwrap();
        let inst = reduce_3sat(&f);
        let m = inst.moments();
        let refs = all_invariant_sets(m, &EnumerateOptions::default()).unwrap();
        let pr = ExactProblem::build(&inst, &refs, &Rational::one()).unwrap();
        let mut walker = Walker::new(&pr);
        let path = [0usize, 3, 8, 14];
        for (level, &j) in path.iter().enumerate() {
            for fs in &mut walker.factors {
                for f in fs.iter_mut() {
                    assert!(f.push(level, j));
                }
            }
            let idx = &path[..=level];
            for e in 0..2 {
                let mut det = vec![0; pr.primes.len()];
                let mut form = vec![vec![0u64; pr.primes.len()]; 1];
                for p in 0..pr.primes.len() {
                    let mut buf = vec![0u64; pr.systems[e].vectors.len()];
                    walker.factors[p][e].residues(level, &mut det[p], &mut buf);
                    form[0][p] = buf[0];
                }
                let det = pr.reconstruct(&det);
                let n = pr.reconstruct(&form[0]);
                let q = Rational::new(n, det * &pr.scale);
                let beta = solve_restricted(m.sigma(e), m.u(e), idx).unwrap();
                let expect: Rational = idx.iter().zip(&beta).map(|(&i, b)| b * &m.u(e)[i]).sum();
                assert_eq!(q, expect, "env {e} at {idx:?}");
            }
        }
    }

    #[test]
    fn single_clause_gaps() {
        let inst = reduce_3sat(&parse_dimacs("p cnf 3 1\n1 2 3 0").unwrap());
        let r = separation_diagnostics(&inst, 24).unwrap();
        assert_eq!(r.subsets, 256);
        assert_eq!(r.invariant_sets, 8);
        assert!(r.all_hold(), "{r:?}");
        assert_eq!(r.second_moments[0], "8");
        let floor = (80f64).powi(-4);
        assert!(r.min_positive_heterogeneity.unwrap() >= floor);
    }

    #[test]
    fn two_clause_gaps() {
        for seed in 0..3 {
            let f = CnfFormula::random(2, 4, 40 + seed).unwrap();
            let r = separation_diagnostics(&reduce_3sat(&f), 24).unwrap();
            assert_eq!(r.subsets, 1 << 15);
            assert!(r.all_hold(), "{r:?}");
        }
    }

    #[test]
    fn hand_built_instances_rejected() {
        let inst = LisInstance::new(
            vec![nalgebra::DMatrix::identity(1, 1)],
            vec![nalgebra::DVector::from_element(1, Rational::one())],
            Provenance::HandBuilt,
        )
        .unwrap();
        assert!(separation_diagnostics(&inst, 24).is_err());
    }
}
