//! Width-3 CNF formulas, a truth-table SAT oracle and the XOR parity gadget.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IgrError, Result};

/// Largest variable count accepted by [`sat_brute_force`].
pub const MAX_BRUTE_FORCE_VARS: usize = 24;

/// A literal: `+i` is `v_i`, `-i` is `¬v_i`, variables numbered from 1.
pub type Literal = i32;

pub type Clause = [Literal; 3];

/// Truth values indexed by variable, `assignment[i]` holding `v_{i+1}`.
pub type Assignment = Vec<bool>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnfFormula {
    n_vars: usize,
    clauses: Vec<Clause>,
}

impl CnfFormula {
    /// Every literal must name a variable in `1..=n_vars` and every variable
    /// must occur somewhere.
    pub fn new(n_vars: usize, clauses: Vec<Clause>) -> Result<Self> {
        let mut seen = vec![false; n_vars];
        for (i, c) in clauses.iter().enumerate() {
            for &lit in c {
                let v = lit.unsigned_abs() as usize;
                if lit == 0 || v > n_vars {
                    return Err(IgrError::InvalidInput(format!(
                        "clause {} uses literal {lit} outside 1..={n_vars}",
                        i + 1
                    )));
                }
                seen[v - 1] = true;
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(IgrError::InvalidInput(format!("variable {} does not occur in any clause", v + 1)));
        }
        Ok(CnfFormula { n_vars, clauses })
    }

    /// Random formula with `k` clauses over at most `max_vars` variables.
    /// Variables that end up unused are dropped and the rest relabelled in
    /// order of first appearance.
    pub fn random(k: usize, max_vars: usize, seed: u64) -> Result<Self> {
        if k == 0 || max_vars == 0 {
            return Err(IgrError::InvalidInput("need at least one clause and one variable".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut label = vec![0i32; max_vars + 1];
        let mut next = 0;
        let mut clauses = Vec::with_capacity(k);
        for _ in 0..k {
            let mut c = [0; 3];
            for lit in &mut c {
                let v = rng.random_range(1..=max_vars);
                if label[v] == 0 {
                    next += 1;
                    label[v] = next;
                }
                *lit = if rng.random_bool(0.5) { label[v] } else { -label[v] };
            }
            clauses.push(c);
        }
        CnfFormula::new(next as usize, clauses)
    }

    /// The nine-clause, four-variable formula whose only model is `(T, F, F, T)`.
    pub fn textbook_example() -> Self {
        CnfFormula::new(
            4,
            vec![
                [1, 2, 3],
                [1, 2, -3],
                [1, -2, 3],
                [1, -2, -3],
                [-1, -2, 3],
                [-1, 2, -3],
                [-1, -2, -3],
                [-4, 4, 2],
                [-1, 2, 4],
            ],
        )
        .expect("valid formula")
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn n_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        assignment.len() == self.n_vars
            && self
                .clauses
                .iter()
                .all(|c| c.iter().any(|&l| literal_value(l, assignment)))
    }

    /// Conjunction with extra clauses that may introduce `extra_vars` new
    /// variables numbered after the existing ones.
    pub fn conjoin(&self, extra_vars: usize, clauses: &[Clause]) -> Result<Self> {
        let mut all = self.clauses.clone();
        all.extend_from_slice(clauses);
        CnfFormula::new(self.n_vars + extra_vars, all)
    }

    pub fn to_dimacs(&self) -> String {
        let mut s = format!("p cnf {} {}\n", self.n_vars, self.clauses.len());
        for c in &self.clauses {
            s.push_str(&format!("{} {} {} 0\n", c[0], c[1], c[2]));
        }
        s
    }
}

impl fmt::Display for CnfFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                write!(f, " ∧ ")?;
            }
            write!(f, "(")?;
            for (j, &l) in c.iter().enumerate() {
                if j > 0 {
                    write!(f, " ∨ ")?;
                }
                if l < 0 {
                    write!(f, "¬")?;
                }
                write!(f, "v{}", l.unsigned_abs())?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

pub fn literal_value(lit: Literal, assignment: &[bool]) -> bool {
    assignment[lit.unsigned_abs() as usize - 1] == (lit > 0)
}

/// Parses DIMACS CNF. Comment lines start with `c`; clauses may span lines
/// and are terminated by `0`.
pub fn parse_dimacs(text: &str) -> Result<CnfFormula> {
    let mut header: Option<(usize, usize)> = None;
    let mut clauses = Vec::new();
    let mut current: Vec<(i32, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('c') {
            continue;
        }
        if t.starts_with('p') {
            if header.is_some() {
                return Err(parse_err(line_no, "second problem line"));
            }
            let parts: Vec<&str> = t.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "p" || parts[1] != "cnf" {
                return Err(parse_err(line_no, "expected `p cnf <vars> <clauses>`"));
            }
            let n = parts[2].parse().map_err(|_| parse_err(line_no, "bad variable count"))?;
            let m = parts[3].parse().map_err(|_| parse_err(line_no, "bad clause count"))?;
            header = Some((n, m));
            continue;
        }
        let Some((n_vars, _)) = header else {
            return Err(parse_err(line_no, "clause before the problem line"));
        };
        for tok in t.split_whitespace() {
            let lit: i32 = tok
                .parse()
                .map_err(|_| parse_err(line_no, &format!("`{tok}` is not an integer literal")))?;
            if lit == 0 {
                if current.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        &format!("clause has {} literals, expected 3", current.len()),
                    ));
                }
                clauses.push([current[0].0, current[1].0, current[2].0]);
                current.clear();
            } else {
                if lit.unsigned_abs() as usize > n_vars {
                    return Err(parse_err(line_no, &format!("variable {} exceeds {n_vars}", lit.unsigned_abs())));
                }
                current.push((lit, line_no));
            }
        }
    }
    let Some((n_vars, m)) = header else {
        return Err(parse_err(0, "missing problem line"));
    };
    if let Some(&(_, l)) = current.first() {
        return Err(parse_err(l, "last clause is not terminated by 0"));
    }
    if clauses.len() != m {
        return Err(parse_err(0, &format!("header announces {m} clauses, found {}", clauses.len())));
    }
    CnfFormula::new(n_vars, clauses)
}

fn parse_err(line: usize, msg: &str) -> IgrError {
    IgrError::Parse { line, msg: msg.to_string() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SatSolutions {
    pub count: usize,
    /// Models in increasing order of the binary number `v_1 v_2 … v_n`
    /// read with `v_1` as the most significant bit.
    pub solutions: Vec<Assignment>,
}

/// Enumerates the full truth table.
pub fn sat_brute_force(f: &CnfFormula) -> Result<SatSolutions> {
    let n = f.n_vars;
    if n > MAX_BRUTE_FORCE_VARS {
        return Err(IgrError::CapExceeded { d: n, cap: MAX_BRUTE_FORCE_VARS });
    }
    // each clause excluded when every literal is false: a (mask, value) test
    let tests: Vec<(u32, u32, bool)> = f
        .clauses
        .iter()
        .map(|c| {
            let mut mask = 0u32;
            let mut falsifying = 0u32;
            let mut tautology = false;
            for &l in c {
                let bit = 1u32 << (n - l.unsigned_abs() as usize);
                let want = if l > 0 { 0 } else { bit };
                if mask & bit != 0 && falsifying & bit != want {
                    tautology = true;
                }
                mask |= bit;
                falsifying |= want;
            }
            (mask, falsifying, tautology)
        })
        .collect();
    let mut solutions = Vec::new();
    for code in 0u32..(1u32 << n) {
        let ok = tests.iter().all(|&(mask, fal, taut)| taut || code & mask != fal);
        if ok {
            solutions.push((0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect());
        }
    }
    Ok(SatSolutions { count: solutions.len(), solutions })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XorGadget {
    pub clauses: Vec<Clause>,
    /// Auxiliary variables, numbered `offset+1 ..= offset+aux_vars`.
    pub aux_vars: usize,
}

/// Clauses forcing `⊕_{i: mask[i]} v_{i+1} = 0`.
///
/// The parity is accumulated along a chain `t_1 = v_a ⊕ v_b`,
/// `t_{r+1} = t_r ⊕ v_c`, … and the last link is forced false. With a single
/// selected variable that variable itself is forced false.
pub fn xor_parity_gadget(mask: &[bool], var_offset: usize) -> Result<XorGadget> {
    let selected: Vec<i32> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i as i32 + 1)
        .collect();
    if selected.is_empty() {
        return Err(IgrError::InvalidInput("parity mask selects no variable".into()));
    }
    let mut clauses = Vec::new();
    let mut acc = selected[0];
    let mut aux = 0;
    for &v in &selected[1..] {
        aux += 1;
        let t = (var_offset + aux) as i32;
        clauses.extend(xor_clauses(acc, v, t));
        acc = t;
    }
    clauses.push([-acc, -acc, -acc]);
    Ok(XorGadget { clauses, aux_vars: aux })
}

/// `x1 ⊕ x2 = x3` as four clauses, each excluding one wrong parity pattern.
fn xor_clauses(x1: i32, x2: i32, x3: i32) -> [Clause; 4] {
    [[-x1, -x2, -x3], [x1, -x2, x3], [-x1, x2, x3], [x1, x2, -x3]]
}
