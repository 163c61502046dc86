use tripde::generator::lookup;
use tripde::lsmc::{run_repeats, BasisSet};
use tripde::params::build_params;
use tripde::symmat::SymMatrix;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let key = args.get(1).map(|s| s.as_str()).unwrap_or("ex6.2");
    let n: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(10);
    let l: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(52083);
    let k: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(4);
    let e = lookup(key).unwrap();
    let params = build_params(&e.problem.bounds, &SymMatrix::identity(e.problem.dim)).unwrap();
    let basis = BasisSet::affine_trig(e.problem.dim, &e.basis_weights).unwrap();
    let t0 = std::time::Instant::now();
    let rep = run_repeats(&e.problem, &params, &e.x0, n, l, k, 42, &basis).unwrap();
    println!(
        "{key} n={n} L={l} K={k}: avg={:.6} var={:.3e} err={:?} ({:.1?})",
        rep.avg,
        rep.var_avg.unwrap_or(f64::NAN),
        rep.abs_error,
        t0.elapsed()
    );
}
