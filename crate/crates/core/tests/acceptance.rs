//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use igr_core::lab::{
    enumerate_invariant_sets, is_maximum_invariant_set, maximum_invariant_sets, moment_bounds, parse_dimacs, reduce_3sat,
    sat_brute_force, separation_diagnostics, verify_parsimony, xor_parity_gadget, CnfFormula, EnumerateOptions,
};
use igr_core::pipeline::rate_experiment;
use igr_core::{
    gamma_star, make_example, population_moments, random_scm, restricted_ls, solve, weight_table, ExampleName,
    IndexSet, PenalizedProblem, Rational, ScmRegime, SolverOptions,
};

fn report(name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(why) => {
            println!("FAIL {name}: {why}");
            panic!("{name}: {why}");
        }
    }
}

fn sets(v: &[&[usize]]) -> Vec<IndexSet> {
    v.iter().map(|s| IndexSet::from_one_based(s.iter().copied()).unwrap()).collect()
}

/// 60 random formulas, 20 each with 1, 2 and 3 clauses.
fn corpus() -> Vec<CnfFormula> {
    let mut out = Vec::new();
    for k in 1..=3usize {
        for seed in 0..20u64 {
            out.push(CnfFormula::random(k, 3 * k, 1000 * k as u64 + seed).unwrap());
        }
    }
    out
}

#[test]
fn parsimony_of_reduction() {
    let start = Instant::now();
    let mut formulas = corpus();
    formulas.push(CnfFormula::textbook_example());
    formulas.push(parse_dimacs("p cnf 1 2\n1 1 1 0\n-1 -1 -1 0").unwrap());
    let outcome = (|| {
        let mut counts = BTreeSet::new();
        for f in &formulas {
            let r = verify_parsimony(f).map_err(|e| e.to_string())?;
            if !r.pass {
                return Err(format!("{f}: {} models, {} invariant sets", r.sat_count, r.invariant_count));
            }
            counts.insert(r.sat_count);
        }
        let elapsed = start.elapsed();
        if elapsed > Duration::from_secs(300) {
            return Err(format!("took {elapsed:?}"));
        }
        Ok(format!("{} formulas, model counts {counts:?}, {elapsed:.2?}", formulas.len()))
    })();
    report("parsimony of the 3-SAT reduction", outcome);
}

#[test]
fn ex2_1_reproduction() {
    let start = Instant::now();
    let outcome = (|| {
        let m = population_moments(&make_example(ExampleName::Ex2_1)).map_err(|e| e.to_string())?.moments;
        let opts = EnumerateOptions::default();
        let found = enumerate_invariant_sets(&m, &opts).map_err(|e| e.to_string())?;
        let expect = sets(&[&[1], &[2], &[4], &[1, 2], &[1, 4], &[2, 4], &[1, 2, 4]]);
        if found != expect {
            return Err(format!("invariant sets {found:?}"));
        }
        let maximum: Vec<IndexSet> = found
            .iter()
            .filter(|s| is_maximum_invariant_set(&m, s, &opts).unwrap())
            .cloned()
            .collect();
        if maximum != sets(&[&[1, 2], &[1, 2, 4]]) {
            return Err(format!("maximum sets {maximum:?}"));
        }
        let elapsed = start.elapsed();
        if elapsed >= Duration::from_secs(1) {
            return Err(format!("took {elapsed:?}"));
        }
        Ok(format!("7 invariant sets, maximum {{1,2}} and {{1,2,4}}, {elapsed:.2?}"))
    })();
    report("ex2_1 reproduction", outcome);
}

#[test]
fn ex2_2_reproduction() {
    let start = Instant::now();
    let outcome = (|| {
        let m = population_moments(&make_example(ExampleName::Ex2_2)).map_err(|e| e.to_string())?.moments;
        let both = restricted_ls(&m, &IndexSet::new([0, 1])).map_err(|e| e.to_string())?;
        if both.is_invariant(0.0) {
            return Err("{1,2} is invariant".into());
        }
        let opts = EnumerateOptions::default();
        let found = enumerate_invariant_sets(&m, &opts).map_err(|e| e.to_string())?;
        if found != sets(&[&[1], &[2]]) {
            return Err(format!("invariant sets {found:?}"));
        }
        let maximum = maximum_invariant_sets(&m, &opts).map_err(|e| e.to_string())?;
        if !maximum.is_empty() {
            return Err(format!("maximum sets {maximum:?}"));
        }
        let elapsed = start.elapsed();
        if elapsed >= Duration::from_secs(1) {
            return Err(format!("took {elapsed:?}"));
        }
        Ok(format!("{{1}} and {{2}} invariant, {{1,2}} not, no maximum set, {elapsed:.2?}"))
    })();
    report("ex2_2 reproduction", outcome);
}

#[test]
fn eigenvalue_and_variance_bounds() {
    let mut formulas = corpus();
    formulas.push(CnfFormula::textbook_example());
    let outcome = (|| {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for f in &formulas {
            let b = moment_bounds(&reduce_3sat(f)).map_err(|e| e.to_string())?;
            if !b.all_hold() {
                return Err(format!("{f}: {b:?}"));
            }
            lo = lo.min(b.eigenvalue_range.0 / b.d as f64);
            hi = hi.max(b.eigenvalue_range.1 / b.d as f64);
        }
        Ok(format!("{} instances, λ/d within [{lo:.4}, {hi:.4}]", formulas.len()))
    })();
    report("eigenvalue and second-moment bounds", outcome);
}

#[test]
fn separation_gaps() {
    let mut formulas: Vec<CnfFormula> = corpus().into_iter().filter(|f| f.n_clauses() <= 2).collect();
    // one d = 22 instance; the full subset walk costs minutes per instance
    formulas.push(CnfFormula::random(3, 3, 1).unwrap());
    let outcome = (|| {
        let mut min_het = f64::INFINITY;
        let mut min_dist = f64::INFINITY;
        let mut subsets = 0u64;
        for f in &formulas {
            let r = separation_diagnostics(&reduce_3sat(f), 24).map_err(|e| e.to_string())?;
            if !r.all_hold() {
                return Err(format!("{f}: {:?}", r.violations));
            }
            let d = r.d as f64;
            min_het = min_het.min(r.min_positive_heterogeneity.unwrap_or(f64::INFINITY) * (10.0 * d).powi(4));
            min_dist = min_dist.min(r.min_distance.unwrap_or(f64::INFINITY) * 40.0 * d);
            subsets += r.subsets;
        }
        Ok(format!(
            "{} instances, {subsets} subsets; smallest gaps relative to their floors: heterogeneity ×{min_het:.3}, distance ×{min_dist:.3}",
            formulas.len()
        ))
    })();
    report("separation gaps", outcome);
}

/// `v({j})` for the three-covariate example computed from its structural
/// equations: `E[Y²] = 2`, `E[X_j Y] = 2a_j`, `E[X_j²] = 1`, `X_1` causal.
fn ex3_1_single_variations() -> [Rational; 3] {
    let q = |n: i64, d: i64| Rational::new(n.into(), d.into());
    let coef = |a: [Rational; 2]| {
        let b: Vec<Rational> = a.iter().map(|a| q(2, 1) * a).collect();
        let mean = (&b[0] + &b[1]) / q(2, 1);
        b.iter().map(|x| (x - &mean) * (x - &mean)).sum::<Rational>() / q(2, 1)
    };
    [q(0, 1), coef([q(2, 3), q(1, 2)]), coef([q(2, 3), q(1, 4)])]
}

#[test]
fn ex3_1_weight_values() {
    let outcome = (|| {
        let m = population_moments(&make_example(ExampleName::Ex3_1)).map_err(|e| e.to_string())?.moments;
        let w = weight_table(&m, 1).map_err(|e| e.to_string())?;
        let got = w.reported();
        let oracle = ex3_1_single_variations();
        for j in 0..3 {
            let exact: f64 = num_traits::ToPrimitive::to_f64(&oracle[j]).unwrap();
            if (got[j] - exact).abs() > 1e-12 {
                return Err(format!("w = {got:?} disagrees with the structural computation {oracle:?}"));
            }
        }
        let expect = [0.0, 1.0 / 6.0, 1.0 / 4.0];
        if got.iter().zip(expect).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!(
                "w = ({}, {}, {}) (sqrt: {:?}), expected (0, 1/6, 1/4)",
                oracle[0], oracle[1], oracle[2], w.penalty_factors()
            ));
        }
        Ok(format!("w = {got:?}"))
    })();
    report("ex3_1 weight values", outcome);
}

#[test]
fn causal_identification() {
    let outcome = (|| {
        let oracle = population_moments(&make_example(ExampleName::Ex3_1)).map_err(|e| e.to_string())?;
        let w = weight_table(&oracle.moments, 1).map_err(|e| e.to_string())?;
        let g_star = gamma_star(&oracle, &w).map_err(|e| e.to_string())?;
        if !(g_star.is_finite() && g_star > 0.0) {
            return Err(format!("γ* = {g_star}"));
        }
        let m = oracle.moments.to_f64();
        let opts = SolverOptions::default();
        let above = solve(&m, &w, 1.01 * g_star, 0.0, &opts).map_err(|e| e.to_string())?;
        let err = (above.beta_vector() - DVector::from_vec(vec![1.0, 0.0, 0.0])).amax();
        if err > 1e-6 {
            return Err(format!("β at 1.01γ* = {:?}", above.beta));
        }
        let ols = m.pooled_sigma().clone().lu().solve(m.pooled_u()).unwrap();
        let zero = solve(&m, &w, 0.0, 0.0, &opts).map_err(|e| e.to_string())?;
        let err0 = (zero.beta_vector() - &ols).amax();
        if err0 > 1e-8 {
            return Err(format!("β at γ = 0 is {:?}, pooled OLS {ols:?}", zero.beta));
        }
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.0125).collect();
        let path = PenalizedProblem::new(&m, &w)
            .and_then(|p| p.path(&grid, 0.0, &opts))
            .map_err(|e| e.to_string())?;
        let (e2, e3) = match (path.exit_gamma[1], path.exit_gamma[2]) {
            (Some(a), Some(b)) => (a, b),
            other => return Err(format!("coordinates 2 and 3 do not both leave the path: {other:?}")),
        };
        if e3 > e2 {
            return Err(format!("x3 leaves at γ = {e3}, after x2 at {e2}"));
        }
        Ok(format!("γ*₁ = {g_star:.6}, |β − β*| = {err:.1e}, |β − OLS| = {err0:.1e}, x3 exits at {e3}, x2 at {e2}"))
    })();
    report("causal identification", outcome);
}

struct Lasso {
    sigma: DMatrix<f64>,
    u: DVector<f64>,
    factors: Vec<f64>,
    gamma: f64,
    lambda: f64,
}

fn random_lasso(rng: &mut ChaCha8Rng) -> Lasso {
    let d = rng.random_range(2..=30);
    let rows = d + rng.random_range(1..=2 * d);
    let a = DMatrix::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0));
    let mut sigma = a.transpose() * &a / rows as f64;
    for i in 0..d {
        sigma[(i, i)] += 0.05;
    }
    let u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let factors = (0..d)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    Lasso { sigma, u, factors, gamma: rng.random_range(0.0..0.5), lambda: rng.random_range(0.0..0.1) }
}

fn objective(p: &Lasso, beta: &DVector<f64>) -> f64 {
    0.5 * beta.dot(&(&p.sigma * beta)) - beta.dot(&p.u)
        + beta.iter().zip(&p.factors).map(|(b, f)| (p.gamma * f + p.lambda) * b.abs()).sum::<f64>()
}

/// Accelerated proximal gradient with restarts, run to stagnation.
fn proximal_gradient(p: &Lasso) -> DVector<f64> {
    let d = p.u.len();
    let step = 1.0 / p.sigma.symmetric_eigenvalues().max();
    let prox = |v: DVector<f64>| {
        DVector::from_fn(d, |j, _| {
            let t = step * (p.gamma * p.factors[j] + p.lambda);
            v[j].signum() * (v[j].abs() - t).max(0.0)
        })
    };
    let mut x = DVector::zeros(d);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut last = objective(p, &x);
    for _ in 0..200_000 {
        let next = prox(&y - step * (&p.sigma * &y - &p.u));
        let value = objective(p, &next);
        if value > last {
            // restart momentum
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        let moved = (&next - &x).amax();
        x = next;
        t = t_next;
        last = value;
        if moved < 1e-15 {
            break;
        }
    }
    x
}

#[test]
fn solver_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = SolverOptions::default();
    let outcome = (|| {
        let mut worst_kkt = 0.0f64;
        let mut worst_gap = 0.0f64;
        for i in 0..100 {
            let p = random_lasso(&mut rng);
            let prob = PenalizedProblem::from_parts(p.sigma.clone(), p.u.clone(), 0.0, p.factors.clone())
                .map_err(|e| e.to_string())?;
            let fit = prob.solve(p.gamma, p.lambda, &opts).map_err(|e| e.to_string())?;
            let beta = fit.beta_vector();
            let kkt = prob.kkt_residual(&beta, p.gamma, p.lambda);
            let reference = proximal_gradient(&p);
            let gap = (objective(&p, &beta) - objective(&p, &reference)).abs();
            if kkt > 1e-6 || gap > 1e-8 {
                return Err(format!("problem {i} (d = {}): KKT {kkt:e}, objective gap {gap:e}", p.u.len()));
            }
            worst_kkt = worst_kkt.max(kkt);
            worst_gap = worst_gap.max(gap);
        }
        Ok(format!("100 problems, max KKT residual {worst_kkt:.1e}, max objective gap {worst_gap:.1e}"))
    })();
    report("solver optimality", outcome);
}

#[test]
fn strong_convexity_and_shrinkage() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = SolverOptions::default();
    let outcome = (|| {
        let mut worst = f64::INFINITY;
        for _ in 0..20 {
            let p = random_lasso(&mut rng);
            let d = p.u.len();
            let prob = PenalizedProblem::from_parts(p.sigma.clone(), p.u.clone(), 0.0, p.factors.clone())
                .map_err(|e| e.to_string())?;
            let beta = prob.solve(p.gamma, p.lambda, &opts).map_err(|e| e.to_string())?.beta_vector();
            let base = objective(&p, &beta);
            for _ in 0..1000 {
                let scale = 10f64.powf(rng.random_range(-3.0..1.0));
                let delta = DVector::from_fn(d, |_, _| rng.random_range(-scale..scale));
                let gap = objective(&p, &(&beta + &delta)) - base;
                let bound = 0.5 * delta.dot(&(&p.sigma * &delta));
                if gap < bound - 1e-9 * (1.0 + bound) {
                    return Err(format!("objective gap {gap:e} below ½‖Σ^½Δ‖² = {bound:e}"));
                }
                worst = worst.min(gap / bound);
            }
            let ols = p.sigma.clone().lu().solve(&p.u).unwrap();
            let ceiling = ols.dot(&(&p.sigma * &ols));
            for g in [0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0] {
                let b = prob.solve(g, 0.0, &opts).map_err(|e| e.to_string())?.beta_vector();
                let norm = b.dot(&(&p.sigma * &b));
                if norm > ceiling * (1.0 + 1e-10) + 1e-12 {
                    return Err(format!("‖Σ^½β‖² = {norm} above the pooled value {ceiling} at γ = {g}"));
                }
            }
        }
        let oracle = population_moments(&make_example(ExampleName::Ex3_1)).map_err(|e| e.to_string())?;
        let m = oracle.moments.to_f64();
        let w = weight_table(&oracle.moments, 1).map_err(|e| e.to_string())?;
        let prob = PenalizedProblem::new(&m, &w).map_err(|e| e.to_string())?;
        let ols = m.pooled_sigma().clone().lu().solve(m.pooled_u()).unwrap();
        let ceiling = ols.dot(&(m.pooled_sigma() * &ols));
        for i in 0..=50 {
            let b = prob.solve(0.1 * i as f64, 0.0, &opts).map_err(|e| e.to_string())?.beta_vector();
            if b.dot(&(m.pooled_sigma() * &b)) > ceiling * (1.0 + 1e-10) {
                return Err(format!("example 3.1: shrinkage fails at γ = {}", 0.1 * i as f64));
            }
        }
        Ok(format!("20 000 perturbations, smallest gap / bound ratio {worst:.4}"))
    })();
    report("strong convexity and shrinkage", outcome);
}

#[test]
fn uncertainty_set_characterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let opts = SolverOptions::default();
    let outcome = (|| {
        let mut problems = Vec::new();
        let oracle = population_moments(&make_example(ExampleName::Ex3_1)).map_err(|e| e.to_string())?;
        let w = weight_table(&oracle.moments, 1).map_err(|e| e.to_string())?;
        let m = oracle.moments.to_f64();
        for g in [0.5, 1.0, 2.0, 3.0] {
            problems.push((PenalizedProblem::new(&m, &w).map_err(|e| e.to_string())?, g));
        }
        for _ in 0..10 {
            let p = random_lasso(&mut rng);
            let prob = PenalizedProblem::from_parts(p.sigma, p.u, 0.0, p.factors).map_err(|e| e.to_string())?;
            problems.push((prob, p.gamma));
        }
        for (idx, (prob, gamma)) in problems.iter().enumerate() {
            let d = prob.d();
            let beta = prob.solve(*gamma, 0.0, &opts).map_err(|e| e.to_string())?.beta_vector();
            let slack = prob.uncertainty_slacks(&beta, *gamma);
            if let Some(s) = slack.iter().find(|s| **s < -1e-8) {
                return Err(format!("problem {idx}: |Σβ − u|_j exceeds γ·sqrt(w_j) by {}", -s));
            }
            let value = beta.dot(&(prob.sigma() * &beta));
            let lu = prob.sigma().clone().lu();
            for _ in 0..1000 {
                let shift = DVector::from_fn(d, |j, _| gamma * prob.factors()[j] * rng.random_range(-1.0..=1.0));
                let member = lu.solve(&(prob.u() + shift)).unwrap();
                let other = member.dot(&(prob.sigma() * &member));
                if other < value - 1e-9 * (1.0 + value) {
                    return Err(format!("problem {idx}: member of Θ_γ with βᵀΣβ = {other} < {value}"));
                }
            }
        }
        Ok(format!("{} problems, 1000 members each", problems.len()))
    })();
    report("uncertainty-set characterization", outcome);
}

#[test]
fn restricted_invariance_regimes() {
    let outcome = (|| {
        let mut checked = 0;
        for (regime, k) in [(ScmRegime::BlockOrthogonal { block_size: 2 }, 2), (ScmRegime::NoAncestorIntervention, 1)] {
            for seed in 0..10u64 {
                let d = 4 + (seed as usize % 4);
                let scm = random_scm(d, regime, 3, seed).map_err(|e| e.to_string())?;
                let oracle = population_moments(&scm).map_err(|e| e.to_string())?;
                let w = weight_table(&oracle.moments, k).map_err(|e| e.to_string())?;
                for j in oracle.s_star.iter() {
                    let v = w.variation()[j];
                    if v.abs() > 1e-10 {
                        return Err(format!("{regime:?}, seed {seed}: w_{k}(x{}) = {v:e}", j + 1));
                    }
                    checked += 1;
                }
            }
        }
        Ok(format!("{checked} causal coordinates with zero weight across 20 models"))
    })();
    report("restricted invariance regimes", outcome);
}

#[test]
fn estimation_rate() {
    let start = Instant::now();
    let outcome = (|| {
        let table = rate_experiment(&make_example(ExampleName::Ex3_1), 1, 1.0, &[250, 1000, 4000], 20)
            .map_err(|e| e.to_string())?;
        let medians: Vec<f64> = table.rows.iter().map(|r| r.median_error).collect();
        let elapsed = start.elapsed();
        if !table.monotone {
            return Err(format!("medians {medians:?} not decreasing"));
        }
        if !(-0.7..=-0.3).contains(&table.slope) {
            return Err(format!("log-log slope {}", table.slope));
        }
        if elapsed > Duration::from_secs(180) {
            return Err(format!("took {elapsed:?}"));
        }
        Ok(format!("medians {medians:.4?}, slope {:.3}, {elapsed:.2?}", table.slope))
    })();
    report("estimation rate", outcome);
}

#[test]
fn xor_gadget() {
    let outcome = (|| {
        let mut cases = 0;
        for seed in 0..12u64 {
            let f = CnfFormula::random(2 + seed as usize % 5, 6, 500 + seed).map_err(|e| e.to_string())?;
            let n = f.n_vars();
            let models = sat_brute_force(&f).map_err(|e| e.to_string())?.solutions;
            for code in 1u32..(1 << n) {
                let mask: Vec<bool> = (0..n).map(|i| code >> i & 1 == 1).collect();
                let gadget = xor_parity_gadget(&mask, n).map_err(|e| e.to_string())?;
                let g = f.conjoin(gadget.aux_vars, &gadget.clauses).map_err(|e| e.to_string())?;
                let with = sat_brute_force(&g).map_err(|e| e.to_string())?.solutions;
                let projected: BTreeSet<Vec<bool>> = with.iter().map(|a| a[..n].to_vec()).collect();
                let expect: BTreeSet<Vec<bool>> = models
                    .iter()
                    .filter(|v| v.iter().zip(&mask).filter(|(x, m)| **x && **m).count() % 2 == 0)
                    .cloned()
                    .collect();
                if projected != expect || with.len() != expect.len() {
                    return Err(format!("{f}, mask {mask:?}: {} models, expected {}", with.len(), expect.len()));
                }
                cases += 1;
            }
        }
        Ok(format!("{cases} (formula, mask) pairs"))
    })();
    report("xor gadget", outcome);
}
