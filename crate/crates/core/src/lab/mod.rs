//! Exact-arithmetic experiments on invariant sets and the 3-SAT reduction.

pub mod cnf;
pub mod invariance;
pub mod parsimony;
pub mod reduction;
pub mod separation;

pub use cnf::{parse_dimacs, sat_brute_force, xor_parity_gadget, Assignment, CnfFormula, SatSolutions, XorGadget};
pub use invariance::{
    all_invariant_sets, enumerate_invariant_sets, is_maximum_invariant_set, maximum_invariant_sets, EnumerateOptions,
    InvariantSet,
};
pub use parsimony::{verify_parsimony, ParsimonyReport};
pub use reduction::{
    decode_solution, encode_action_profile, reduce_3sat, ContradictionMatrix, DecodeFailure, LisInstance, Provenance,
};
pub use separation::{moment_bounds, separation_diagnostics, MomentBounds, SeparationReport};
