//! Compiling 3-CNF formulas into two-environment invariance instances.
//!
//! Clause `i` (zero-based) owns the seven coordinates `7i .. 7i+6`; coordinate
//! `7i + t - 1` stands for action `t ∈ 1..=7`, whose three bits (most
//! significant first) are the truth values of the clause's literals. The
//! final coordinate `7k` is shared by all clauses.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use super::cnf::{Assignment, CnfFormula};
use crate::error::{IgrError, Result};
use crate::linalg::{rational_definiteness, Definiteness};
use crate::moments::EnvMoments;
use crate::scalar::Rational;
use crate::subset::IndexSet;

pub const ACTIONS_PER_CLAUSE: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    HandBuilt,
    ReducedFromCnf { clauses: usize },
}

/// Exact per-environment moments together with where they came from.
#[derive(Clone, Debug)]
pub struct LisInstance {
    moments: EnvMoments<Rational>,
    provenance: Provenance,
}

impl LisInstance {
    /// Every `Σ^{(e)}` has to be positive definite, which is decided exactly.
    pub fn new(sigma: Vec<DMatrix<Rational>>, u: Vec<DVector<Rational>>, provenance: Provenance) -> Result<Self> {
        for (e, s) in sigma.iter().enumerate() {
            if s.nrows() == s.ncols() && rational_definiteness(s) != Definiteness::PositiveDefinite {
                return Err(IgrError::NotPositiveDefinite(format!("sigma of environment {}", e + 1)));
            }
        }
        let moments = EnvMoments::new(sigma, u)?;
        if let Provenance::ReducedFromCnf { clauses } = provenance {
            if moments.d() != ACTIONS_PER_CLAUSE * clauses + 1 {
                return Err(IgrError::DimensionMismatch(format!(
                    "a reduction of {clauses} clauses has d = {}, got {}",
                    ACTIONS_PER_CLAUSE * clauses + 1,
                    moments.d()
                )));
            }
        }
        Ok(LisInstance { moments, provenance })
    }

    pub fn d(&self) -> usize {
        self.moments.d()
    }

    pub fn n_envs(&self) -> usize {
        self.moments.n_envs()
    }

    pub fn moments(&self) -> &EnvMoments<Rational> {
        &self.moments
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// The variable values an action fixes, as `(variable index, value)` pairs
/// in literal order. Variables are zero-based here.
pub fn action_values(clause: &[i32; 3], action: usize) -> [(usize, bool); 3] {
    debug_assert!((1..=ACTIONS_PER_CLAUSE).contains(&action));
    std::array::from_fn(|p| {
        let truth = action >> (2 - p) & 1 == 1;
        let lit = clause[p];
        (lit.unsigned_abs() as usize - 1, if lit > 0 { truth } else { !truth })
    })
}

fn conflicting(a: &[(usize, bool)], b: &[(usize, bool)]) -> bool {
    a.iter().any(|&(v, x)| b.iter().any(|&(w, y)| v == w && x != y))
}

/// Symmetric 0/1 matrix over the `7k` clause actions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContradictionMatrix {
    k: usize,
    a: DMatrix<u8>,
}

impl ContradictionMatrix {
    pub fn build(f: &CnfFormula) -> Self {
        let k = f.n_clauses();
        let n = ACTIONS_PER_CLAUSE * k;
        let values: Vec<[(usize, bool); 3]> = (0..n)
            .map(|j| action_values(&f.clauses()[j / ACTIONS_PER_CLAUSE], j % ACTIONS_PER_CLAUSE + 1))
            .collect();
        let a = DMatrix::from_fn(n, n, |r, c| {
            let same_clause = r / ACTIONS_PER_CLAUSE == c / ACTIONS_PER_CLAUSE;
            let hit = if r == c {
                conflicting(&values[r], &values[r])
            } else {
                same_clause || conflicting(&values[r], &values[c])
            };
            hit as u8
        });
        ContradictionMatrix { k, a }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.a[(r, c)]
    }

    pub fn matrix(&self) -> &DMatrix<u8> {
        &self.a
    }
}

/// Environment 1 is `(I, 1)`. Environment 2 is
///
/// ```text
/// Σ = [ 5d·I + A    ½·1 ]      u = [ (5d + ½)·1 ]
///     [ ½·1ᵀ        5d  ]          [ 5d + k/2   ]
/// ```
pub fn reduce_3sat(f: &CnfFormula) -> LisInstance {
    let k = f.n_clauses();
    let n = ACTIONS_PER_CLAUSE * k;
    let d = n + 1;
    let a = ContradictionMatrix::build(f);
    let five_d = Rational::from_integer((5 * d).into());
    let half = Rational::new(1.into(), 2.into());

    let sigma1 = DMatrix::<Rational>::identity(d, d);
    let u1 = DVector::from_element(d, Rational::one());

    let mut sigma2 = DMatrix::from_element(d, d, Rational::zero());
    for r in 0..n {
        for c in 0..n {
            sigma2[(r, c)] = Rational::from_integer(a.get(r, c).into());
        }
        sigma2[(r, r)] += &five_d;
        sigma2[(r, n)] = half.clone();
        sigma2[(n, r)] = half.clone();
    }
    sigma2[(n, n)] = five_d.clone();
    let mut u2 = DVector::from_element(d, &five_d + &half);
    u2[n] = &five_d + Rational::new(k.into(), 2.into());

    LisInstance::new(vec![sigma1, sigma2], vec![u1, u2], Provenance::ReducedFromCnf { clauses: k })
        .expect("reduced instances are positive definite")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeFailure {
    WrongDimension { expected: usize, found: usize },
    LastCoordinateAbsent,
    WrongSize { expected: usize, found: usize },
    ClauseWithoutAction(usize),
    SeveralActions(usize),
    Inconsistent { variable: usize },
    Unsatisfied { clause: usize },
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeFailure::WrongDimension { expected, found } => {
                write!(f, "index {found} outside the instance dimension {expected}")
            }
            DecodeFailure::LastCoordinateAbsent => write!(f, "last coordinate absent"),
            DecodeFailure::WrongSize { expected, found } => {
                write!(f, "set has {found} elements, expected {expected}")
            }
            DecodeFailure::ClauseWithoutAction(i) => write!(f, "clause {} has no action", i + 1),
            DecodeFailure::SeveralActions(i) => write!(f, "clause {} has more than one action", i + 1),
            DecodeFailure::Inconsistent { variable } => {
                write!(f, "actions disagree on variable v{}", variable + 1)
            }
            DecodeFailure::Unsatisfied { clause } => write!(f, "clause {} is not satisfied", clause + 1),
        }
    }
}

impl std::error::Error for DecodeFailure {}

/// Reads an assignment off an action profile `{7i + a_i - 1} ∪ {7k}`.
pub fn decode_solution(s: &IndexSet, f: &CnfFormula) -> std::result::Result<Assignment, DecodeFailure> {
    let k = f.n_clauses();
    let d = ACTIONS_PER_CLAUSE * k + 1;
    if let Some(m) = s.max().filter(|&m| m >= d) {
        return Err(DecodeFailure::WrongDimension { expected: d, found: m + 1 });
    }
    if !s.contains(d - 1) {
        return Err(DecodeFailure::LastCoordinateAbsent);
    }
    if s.len() != k + 1 {
        return Err(DecodeFailure::WrongSize { expected: k + 1, found: s.len() });
    }
    let mut action = vec![None; k];
    for j in s.iter().filter(|&j| j < d - 1) {
        let clause = j / ACTIONS_PER_CLAUSE;
        if action[clause].replace(j % ACTIONS_PER_CLAUSE + 1).is_some() {
            return Err(DecodeFailure::SeveralActions(clause));
        }
    }
    let mut value: Vec<Option<bool>> = vec![None; f.n_vars()];
    for (i, a) in action.iter().enumerate() {
        let a = a.ok_or(DecodeFailure::ClauseWithoutAction(i))?;
        for (v, x) in action_values(&f.clauses()[i], a) {
            match value[v] {
                Some(y) if y != x => return Err(DecodeFailure::Inconsistent { variable: v }),
                _ => value[v] = Some(x),
            }
        }
    }
    // every variable occurs in some clause, so all are fixed
    let assignment: Assignment = value.into_iter().map(|v| v.unwrap_or(false)).collect();
    if let Some(clause) = f
        .clauses()
        .iter()
        .position(|c| !c.iter().any(|&l| super::cnf::literal_value(l, &assignment)))
    {
        return Err(DecodeFailure::Unsatisfied { clause });
    }
    Ok(assignment)
}

/// The action profile of a model of `f`.
pub fn encode_action_profile(assignment: &[bool], f: &CnfFormula) -> Result<IndexSet> {
    if !f.is_satisfied_by(assignment) {
        return Err(IgrError::InvalidInput("assignment does not satisfy the formula".into()));
    }
    let k = f.n_clauses();
    let mut idx: Vec<usize> = f
        .clauses()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let t = c.iter().fold(0, |acc, &l| {
                acc << 1 | super::cnf::literal_value(l, assignment) as usize
            });
            ACTIONS_PER_CLAUSE * i + t - 1
        })
        .collect();
    idx.push(ACTIONS_PER_CLAUSE * k);
    Ok(IndexSet::new(idx))
}
