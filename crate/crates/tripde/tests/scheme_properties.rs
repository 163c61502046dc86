//! Cross-module properties of the one-step operator and the two solvers:
//! consistency order, monotonicity under the coefficient check, and the
//! exhaustive-path equivalence between regression Monte Carlo and the tree.

use tripde::generator::{lookup, make_scalar_hjb, ProblemF, ScalarDriver};
use tripde::kernels::{enumerate_support, one_step, GammaView, SparsityMask, TrinomialSpec};
use tripde::lattice::{monotone_check_at, solve_tree};
use tripde::lsmc::{backward_induct, exhaustive_paths, BasisSet};
use tripde::params::{build_params, MonotonicityParams};
use tripde::symmat::SymMatrix;

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64) / ((1u64 << 53) as f64)
}

/// Evaluates `phi` on the shifted support points.
fn values_on_support(
    spec: &TrinomialSpec,
    x: &[f64],
    h: f64,
    phi: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    enumerate_support(spec)
        .unwrap()
        .iter()
        .map(|o| {
            let shift = spec.sigma0().matvec(&o.xi);
            let y: Vec<f64> =
                x.iter().zip(&shift).map(|(xi, sh)| xi + h.sqrt() * sh).collect();
            phi(&y)
        })
        .collect()
}

#[test]
fn consistency_is_first_order() {
    // For the smooth test function phi(t, x) = sin(t + sum x), the ratio
    // [phi - T_h phi(t+h)] / h approaches -d(phi)/dt - G(t, x, phi, Dphi,
    // D2phi), with the gap shrinking at least 1.7x per halving of h.
    let e = lookup("ex6.1").unwrap();
    let problem = &e.problem;
    let params = build_params(&problem.bounds, &SymMatrix::identity(3)).unwrap();
    let spec = TrinomialSpec::from_params(&params).unwrap();
    let f = ProblemF::new(problem, spec.sigma0()).unwrap();

    let t = 0.3;
    let x = [0.4, -0.2, 0.9];
    let phi = |t: f64, x: &[f64]| (t + x.iter().sum::<f64>()).sin();
    // Hand derivatives of the test function.
    let phase = t + x.iter().sum::<f64>();
    let (s, c) = phase.sin_cos();
    let du = vec![c; 3];
    let hess = SymMatrix::from_fn(3, |_i, _j| -s);
    let gv = GammaView::new(&hess, SparsityMask::Diagonal);
    let limit = -c - problem.evaluate(t, &x, s, &du, &gv);

    let mut errs = Vec::new();
    let mut h = 0.08;
    for _ in 0..4 {
        let values = values_on_support(&spec, &x, h, |y| phi(t + h, y));
        let step = one_step(&spec, &f, t, &x, h, &values).unwrap();
        let ratio = (phi(t, &x) - step) / h;
        errs.push((ratio - limit).abs());
        h /= 2.0;
    }
    for w in errs.windows(2) {
        assert!(
            w[0] / w[1] >= 1.7,
            "consistency gap must shrink by at least 1.7x per halving: {errs:?}"
        );
    }
}

#[test]
fn monotone_pairs_under_passing_check() {
    // Ordered inputs stay ordered through one step whenever the runtime
    // coefficient check passes.
    let e = lookup("ex6.1").unwrap();
    let problem = &e.problem;
    let params = build_params(&problem.bounds, &SymMatrix::identity(3)).unwrap();
    let spec = TrinomialSpec::from_params(&params).unwrap();
    let f = ProblemF::new(problem, spec.sigma0()).unwrap();
    let h = 0.5 / 160.0;
    assert!(monotone_check_at(&params, problem, h).unwrap());

    let support_len = 27;
    let mut state = 31u64;
    for case in 0..300 {
        let x: Vec<f64> = (0..3).map(|_| 10.0 * lcg(&mut state) - 5.0).collect();
        let lo: Vec<f64> =
            (0..support_len).map(|_| 2.0 * lcg(&mut state) - 1.0).collect();
        let hi: Vec<f64> =
            lo.iter().map(|v| v + 2.0 * lcg(&mut state)).collect();
        let t = 0.4 * lcg(&mut state);
        let a = one_step(&spec, &f, t, &x, h, &lo).unwrap();
        let b = one_step(&spec, &f, t, &x, h, &hi).unwrap();
        assert!(b >= a - 1e-12, "case {case}: order violated ({a} > {b})");
    }
}

#[test]
fn exhaustive_lsmc_equals_tree_on_random_terminals() {
    // Saturating indicator basis + exact path weights reproduce the tree.
    let mut state = 2024u64;
    for seed in 0..10u64 {
        let d = 1 + (seed % 2) as usize;
        let n = 2 + (seed % 2) as usize; // (d, n) in {(1,2),(2,3)}
        // Random smooth terminal data via a custom driver problem.
        let a1 = 2.0 * lcg(&mut state) - 1.0;
        let a2 = 2.0 * lcg(&mut state) - 1.0;
        let b1 = 1.0 + lcg(&mut state);
        let c1 = 6.0 * lcg(&mut state);
        let mut problem = make_scalar_hjb(
            d,
            0.3,
            1.0,
            2.0f64.sqrt(),
            ScalarDriver::GradientAndValue { sq_lo: 1.0, sq_hi: 2.0 },
        )
        .unwrap();
        problem.terminal = std::sync::Arc::new(move |x: &[f64]| {
            let s: f64 = x.iter().sum();
            a1 * (b1 * s + c1).sin() + a2 * (0.5 * s).cos()
        });
        problem.true_solution = None;
        let params = build_params(&problem.bounds, &SymMatrix::identity(d)).unwrap();
        let x0 = vec![0.2; d];
        let tree = solve_tree(&problem, &params, &x0, n).unwrap();
        let ens = exhaustive_paths(&problem, &params, &x0, n).unwrap();
        let basis = BasisSet::lattice_indicators(d, n, &x0, &params, problem.horizon).unwrap();
        let sol = backward_induct(&problem, &params, &ens, &basis).unwrap();
        assert!(
            (sol.y0 - tree.value).abs() <= 1e-10,
            "seed {seed}: exhaustive regression {} vs tree {}",
            sol.y0,
            tree.value
        );
    }
}
