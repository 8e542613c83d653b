mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochastic_contraction::lmi::{solve, AffineExpr, LmiProblem, SolverOptions, Var};

use common::{oracle_min_eig, random_matrix, random_sym, spectral_radius};

/// `C_c + L_c X L_cᵀ ⪰ 0` constraints on a symmetric `2×2` unknown, boxed by `−r I ⪯ X ⪯ r I`.
fn random_problem(rng: &mut ChaCha8Rng, count: usize, radius: f64) -> (LmiProblem, Var, Vec<(DMatrix<f64>, DMatrix<f64>)>) {
    let mut p = LmiProblem::new();
    let x = p.symmetric("X", 2);
    let xe = p.expr(x);
    let eye = AffineExpr::identity(2).scale(radius);
    p.add_constraint("upper", eye.sub(&xe).unwrap()).unwrap();
    p.add_constraint("lower", eye.add(&xe).unwrap()).unwrap();
    let mut data = Vec::new();
    for c in 0..count {
        let data_c = random_constraint(rng);
        push(&mut p, &xe, &data_c, &format!("c{c}"));
        data.push(data_c);
    }
    (p, x, data)
}

fn random_constraint(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    (random_sym(rng, 3, 1.0) + DMatrix::identity(3, 3) * 0.5, random_matrix(rng, 3, 2, 1.0))
}

fn push(p: &mut LmiProblem, xe: &AffineExpr, (c, l): &(DMatrix<f64>, DMatrix<f64>), name: &str) {
    let g = AffineExpr::constant(c.clone()).add(&xe.lmul(l).unwrap().rmul(&l.transpose()).unwrap()).unwrap();
    p.add_constraint(name, g).unwrap();
}

fn options() -> SolverOptions {
    SolverOptions { max_iter: 400, ..SolverOptions::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feasible_answers_survive_an_independent_recheck(seed in any::<u64>(), count in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, _, data) = random_problem(&mut rng, count, 2.0);
        let sol = solve(&p, &options()).unwrap();
        if sol.is_feasible() {
            let x = sol.values[0].clone();
            prop_assert!(oracle_min_eig(&(DMatrix::identity(2, 2) * 2.0 - &x)) > 0.0);
            prop_assert!(oracle_min_eig(&(DMatrix::identity(2, 2) * 2.0 + &x)) > 0.0);
            for (c, l) in &data {
                prop_assert!(oracle_min_eig(&(c + l * &x * l.transpose())) > 0.0);
            }
            let worst = sol.constraint_margins.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!((worst - sol.achieved_margin).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_constraint_never_raises_the_optimal_margin(seed in any::<u64>(), count in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p, var, _) = random_problem(&mut rng, count, 1.0);
        let before = solve(&p, &options()).unwrap();
        let x = p.expr(var);
        let extra = random_constraint(&mut rng);
        push(&mut p, &x, &extra, "extra");
        let after = solve(&p, &options()).unwrap();
        prop_assert!(after.achieved_margin <= before.margin_upper_bound + 1e-7,
            "{} > {}", after.achieved_margin, before.margin_upper_bound);
    }

    #[test]
    fn homogeneous_verdicts_are_scale_invariant(seed in any::<u64>(), offset in -0.1f64..0.1, alpha in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 2, 2, 0.8);
        let rho = spectral_radius(&a);
        let l2 = (rho + offset).max(0.05).powi(2);
        prop_assume!((l2.sqrt() - rho).abs() > 0.02);
        let mut p = LmiProblem::new();
        let v = p.symmetric("P", 2);
        let pe = p.expr(v);
        let g = pe.scale(l2).sub(&pe.lmul(&a.transpose()).unwrap().rmul(&a).unwrap()).unwrap();
        p.add_constraint("rate", g).unwrap();
        p.add_constraint("P", pe).unwrap();
        prop_assert!(p.is_homogeneous());
        let base = solve(&p, &options()).unwrap();
        let scaled = solve(&p.scaled(alpha), &options()).unwrap();
        prop_assert_eq!(base.is_feasible(), l2.sqrt() > rho);
        prop_assert_eq!(base.is_feasible(), scaled.is_feasible());
    }
}

#[test]
fn negative_definite_constant_is_infeasible() {
    let mut p = LmiProblem::new();
    let x = p.symmetric("X", 2);
    let g = AffineExpr::identity(2).scale(-1.0).add(&p.expr(x).scale(0.0)).unwrap();
    p.add_constraint("neg", g).unwrap();
    let sol = solve(&p, &SolverOptions::default()).unwrap();
    assert!(!sol.is_feasible());
    assert!(sol.margin_upper_bound < p.margin());
    assert_eq!(sol.achieved_margin, -1.0);
}
