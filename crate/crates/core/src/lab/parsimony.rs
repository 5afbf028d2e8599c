//! Count comparison between satisfying assignments and invariant sets of the
//! reduced instance.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::Result;
use crate::lab::cnf::{sat_brute_force, CnfFormula};
use crate::lab::invariance::{enumerate_invariant_sets, EnumerateOptions};
use crate::lab::reduction::{decode_solution, reduce_3sat};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParsimonyReport {
    pub n_vars: usize,
    pub n_clauses: usize,
    pub d: usize,
    pub sat_count: usize,
    pub invariant_count: usize,
    /// Every invariant set decodes to a model, and distinct sets to distinct models.
    pub decodes_bijectively: bool,
    pub pass: bool,
}

pub fn verify_parsimony(f: &CnfFormula) -> Result<ParsimonyReport> {
    let sat = sat_brute_force(f)?;
    let inst = reduce_3sat(f);
    let sets = enumerate_invariant_sets(inst.moments(), &EnumerateOptions::default())?;
    let mut models = BTreeSet::new();
    let mut bijective = true;
    for s in &sets {
        match decode_solution(s, f) {
            Ok(a) => bijective &= models.insert(a),
            Err(_) => bijective = false,
        }
    }
    bijective &= models.len() == sat.count;
    Ok(ParsimonyReport {
        n_vars: f.n_vars(),
        n_clauses: f.n_clauses(),
        d: inst.d(),
        sat_count: sat.count,
        invariant_count: sets.len(),
        decodes_bijectively: bijective,
        pass: bijective && sets.len() == sat.count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::cnf::parse_dimacs;

    #[test]
    fn small_formulas() {
        let r = verify_parsimony(&parse_dimacs("p cnf 3 1\n1 2 3 0").unwrap()).unwrap();
        assert_eq!((r.sat_count, r.invariant_count, r.d), (7, 7, 8));
        assert!(r.pass);
        let unsat = parse_dimacs("p cnf 1 2\n1 1 1 0\n-1 -1 -1 0").unwrap();
        let r = verify_parsimony(&unsat).unwrap();
        assert_eq!((r.sat_count, r.invariant_count), (0, 0));
        assert!(r.pass);
    }

    #[test]
    fn textbook_formula() {
        let r = verify_parsimony(&CnfFormula::textbook_example()).unwrap();
        assert_eq!((r.sat_count, r.invariant_count, r.d), (1, 1, 64));
        assert!(r.pass);
    }
}
