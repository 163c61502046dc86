//! Finite-difference residual checks: every registered problem with an
//! attached closed-form solution must satisfy its own PDE,
//! `|du/dt + G(t, x, u, Du, D^2 u)| <= 1e-6`, at random points. Sixth-order
//! central differences of the closed form provide the derivatives, keeping
//! the check independent of the scheme's expectation kernels.

use tripde::generator::{lookup, make_quasilinear, FbsdeCoefficients, PdeProblem};
use tripde::kernels::{GammaView, SparsityMask};
use tripde::symmat::SymMatrix;

use std::sync::Arc;

const W1: [f64; 7] = [-1.0 / 60.0, 3.0 / 20.0, -3.0 / 4.0, 0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0];
const W2: [f64; 7] =
    [1.0 / 90.0, -3.0 / 20.0, 3.0 / 2.0, -49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0];

fn d_dt(u: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64], h: f64) -> f64 {
    W1.iter().enumerate().map(|(k, w)| w * u(t + (k as f64 - 3.0) * h, x)).sum::<f64>() / h
}

fn d_dx(u: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64], j: usize, h: f64) -> f64 {
    let mut y = x.to_vec();
    W1.iter()
        .enumerate()
        .map(|(k, w)| {
            y[j] = x[j] + (k as f64 - 3.0) * h;
            w * u(t, &y)
        })
        .sum::<f64>()
        / h
}

fn d2_diag(u: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64], j: usize, h: f64) -> f64 {
    let mut y = x.to_vec();
    W2.iter()
        .enumerate()
        .map(|(k, w)| {
            y[j] = x[j] + (k as f64 - 3.0) * h;
            w * u(t, &y)
        })
        .sum::<f64>()
        / (h * h)
}

fn d2_mixed(u: &dyn Fn(f64, &[f64]) -> f64, t: f64, x: &[f64], a: usize, b: usize, h: f64) -> f64 {
    // First-derivative stencil applied twice.
    let mut y = x.to_vec();
    let mut total = 0.0;
    for (ka, wa) in W1.iter().enumerate() {
        y[a] = x[a] + (ka as f64 - 3.0) * h;
        let mut inner = 0.0;
        for (kb, wb) in W1.iter().enumerate() {
            y[b] = x[b] + (kb as f64 - 3.0) * h;
            inner += wb * u(t, &y);
        }
        y[b] = x[b];
        total += wa * inner;
    }
    total / (h * h)
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64) / ((1u64 << 53) as f64)
}

/// Max residual of the attached solution over `points` random samples.
fn max_residual(problem: &PdeProblem, x_center: &[f64], points: usize, seed: u64) -> f64 {
    let sol = problem.true_solution.as_ref().expect("problem has a closed-form solution");
    let u = |t: f64, x: &[f64]| sol(t, x);
    let d = problem.dim;
    let h = 1e-2;
    let mut state = seed;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let t = problem.horizon * lcg(&mut state);
        let x: Vec<f64> =
            (0..d).map(|j| x_center[j] + 2.0 * lcg(&mut state) - 1.0).collect();
        let val = u(t, &x);
        let ut = d_dt(&u, t, &x, h);
        let du: Vec<f64> = (0..d).map(|j| d_dx(&u, t, &x, j, h)).collect();
        let mut hess = SymMatrix::zeros(d);
        for a in 0..d {
            for b in a..d {
                if !problem.mask.contains(a, b) {
                    continue;
                }
                let v = if a == b {
                    d2_diag(&u, t, &x, a, h)
                } else {
                    d2_mixed(&u, t, &x, a, b, h)
                };
                hess.set(a, b, v);
            }
        }
        let gv = GammaView::new(&hess, problem.mask);
        let g = problem.evaluate(t, &x, val, &du, &gv);
        worst = worst.max((ut + g).abs());
    }
    worst
}

#[test]
fn scalar_hjb_solutions_satisfy_their_pdes() {
    for key in ["ex6.1", "ex6.2", "ex6.5"] {
        let e = lookup(key).unwrap();
        let r = max_residual(&e.problem, &e.x0, 100, 11);
        assert!(r <= 1e-6, "{key}: residual {r}");
    }
}

#[test]
fn fbsde_solution_satisfies_its_pde() {
    let e = lookup("ex6.4").unwrap();
    let r = max_residual(&e.problem, &e.x0, 100, 22);
    assert!(r <= 1e-6, "residual {r}");
}

#[test]
fn fbsde_low_dimensional_analog() {
    // Same functional forms at d = 3: the manufactured solution still works.
    let problem = fbsde_analog(3, 0.4);
    let r = max_residual(&problem, &[1.0, 2.0, 3.0], 100, 33);
    assert!(r <= 1e-8, "residual {r}");
}

#[test]
fn matrix_hjb_solution_satisfies_its_pde() {
    let e = lookup("ex6.6").unwrap();
    let r = max_residual(&e.problem, &e.x0, 100, 44);
    assert!(r <= 1e-6, "residual {r}");
}

#[test]
fn matrix_hjb_small_manufactured_instance() {
    use tripde::generator::{make_matrix_hjb, MatrixDriver};
    let lo = SymMatrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.8]]).unwrap();
    let hi = SymMatrix::from_rows(&[vec![1.9, 0.1], vec![0.1, 1.5]]).unwrap();
    let problem =
        make_matrix_hjb(lo, hi, 0.5, vec![1.0, 0.5], MatrixDriver::Manufactured, 2.0).unwrap();
    let r = max_residual(&problem, &[0.0, 0.0], 100, 55);
    assert!(r <= 1e-8, "residual {r}");
}

#[test]
fn tridiagonal_solution_satisfies_its_pde() {
    let e = lookup("ex6.8").unwrap();
    let r = max_residual(&e.problem, &e.x0, 100, 66);
    assert!(r <= 1e-6, "residual {r}");
}

/// The coupled-FBSDE benchmark forms at arbitrary dimension.
fn fbsde_analog(dim: usize, horizon: f64) -> PdeProblem {
    let d = dim as f64;
    let m = dim;
    fn sig(x: &[f64], y: f64, d: f64) -> f64 {
        1.0 + (x.iter().sum::<f64>() / d + y).sin() / 3.0
    }
    let diffusion = Arc::new(move |_t: f64, x: &[f64], y: f64| {
        let s = sig(x, y, d);
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            out[i * m + i] = s;
        }
        out
    });
    let drift = Arc::new(move |_t: f64, x: &[f64], y: f64, z: &[f64]| {
        let s = sig(x, y, d);
        z.iter().map(|&zi| (y + zi / s).cos()).collect::<Vec<f64>>()
    });
    let driver = Arc::new(move |t: f64, x: &[f64], y: f64, z: &[f64]| {
        let s = sig(x, y, d);
        let phase = t + x.iter().sum::<f64>();
        let zbar = z.iter().sum::<f64>() / d;
        (d / 2.0) * phase.sin() * s * s - zbar / s - d * phase.cos() * (y + phase.cos()).cos()
    });
    let terminal = Arc::new(move |x: &[f64]| (horizon + x.iter().sum::<f64>()).sin());
    let sol = Arc::new(|t: f64, x: &[f64]| (t + x.iter().sum::<f64>()).sin());
    make_quasilinear(
        FbsdeCoefficients { m, drift, diffusion, driver, terminal, diagonal: true },
        dim,
        horizon,
        (4.0 / 9.0, 16.0 / 9.0),
        None,
        30.0,
        23.0,
        Some(sol),
    )
    .unwrap()
}

#[test]
fn mask_guard_trips_in_debug_builds() {
    // Reading an unmasked entry is a contract violation.
    let result = std::panic::catch_unwind(|| {
        let g = SymMatrix::identity(3);
        let gv = GammaView::new(&g, SparsityMask::Diagonal);
        gv.get(0, 1)
    });
    if cfg!(debug_assertions) {
        assert!(result.is_err());
    }
}
