//! Regression Monte Carlo solver for high dimension: simulate `L` trinomial
//! paths, approximate each conditional expectation
//! `E[Y K_k(xi)]` by least-squares regression on basis functions of the
//! current state, run backward induction, and repeat `K` times for variance
//! estimates.
//!
//! Reproducibility contract: identical `(seed, configuration)` gives
//! bit-identical results for any worker-thread count. Per-path work is pure;
//! the only cross-path reductions (Gram matrix and regression right-hand
//! sides) are accumulated over fixed-size chunks and merged in chunk order.

use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::generator::{PdeProblem, ProblemF};
use crate::kernels::{derive_seed, GammaView, SchemeNonlinearity, TrinomialSpec, XiStream};
use crate::params::MonotonicityParams;
use crate::symmat::{cholesky_lower, sym_eig, LowerTriangular, SymMatrix};

/// Paths per reduction chunk. Fixed so that partial sums are independent of
/// the thread count.
const CHUNK: usize = 8192;

/// Gram condition threshold beyond which a ridge term is added.
const RIDGE_CONDITION: f64 = 1e12;

/// Regression basis. The built-in families have direct evaluation paths;
/// arbitrary closures plug in through `Custom`.
#[derive(Clone)]
pub enum BasisSet {
    /// `1, x_1, ..., x_d, sin(t + w.x), cos(t + w.x)`.
    AffineTrig { dim: usize, weights: Vec<f64> },
    /// Indicator per terminal-layer lattice node: saturating basis that
    /// reproduces exact per-node conditional expectations on the tree grid.
    LatticeIndicators { dim: usize, n: usize, x0: Vec<f64>, inv_step: Vec<f64> },
    Custom { funcs: Vec<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>>, names: Vec<String> },
}

impl BasisSet {
    pub fn affine_trig(dim: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for d={dim}",
                weights.len()
            )));
        }
        Ok(BasisSet::AffineTrig { dim, weights: weights.to_vec() })
    }

    /// One indicator per node offset of the layer-`n` grid spanned by
    /// `sqrt(h) sigma0 / sqrt(p)` (diagonal `sigma0` only).
    pub fn lattice_indicators(
        dim: usize,
        n: usize,
        x0: &[f64],
        params: &MonotonicityParams,
        horizon: f64,
    ) -> Result<Self> {
        let spec = TrinomialSpec::from_params(params)?;
        let Some(diag) = spec.sigma0_diag() else {
            return Err(Error::InvalidArgument(
                "indicator basis requires diagonal sigma0".into(),
            ));
        };
        let h = horizon / n as f64;
        let scale = h.sqrt() / params.p.sqrt();
        let inv_step: Vec<f64> = diag.iter().map(|s| 1.0 / (s * scale)).collect();
        Ok(BasisSet::LatticeIndicators { dim, n, x0: x0.to_vec(), inv_step })
    }

    pub fn custom(
        funcs: Vec<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>>,
        names: Vec<String>,
    ) -> Result<Self> {
        if funcs.is_empty() || funcs.len() != names.len() {
            return Err(Error::InvalidArgument(
                "need at least one basis function with matching names".into(),
            ));
        }
        Ok(BasisSet::Custom { funcs, names })
    }

    pub fn len(&self) -> usize {
        match self {
            BasisSet::AffineTrig { dim, .. } => dim + 3,
            BasisSet::LatticeIndicators { dim, n, .. } => (2 * n + 1).pow(*dim as u32),
            BasisSet::Custom { funcs, .. } => funcs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            BasisSet::AffineTrig { dim, .. } => {
                let mut v = vec!["1".to_string()];
                v.extend((0..*dim).map(|j| format!("x{}", j + 1)));
                v.push("sin(t+w.x)".into());
                v.push("cos(t+w.x)".into());
                v
            }
            BasisSet::LatticeIndicators { .. } => {
                (0..self.len()).map(|k| format!("node{k}")).collect()
            }
            BasisSet::Custom { names, .. } => names.clone(),
        }
    }

    pub fn eval_row(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match self {
            BasisSet::AffineTrig { dim, weights } => {
                out[0] = 1.0;
                out[1..1 + dim].copy_from_slice(x);
                let phase = t + x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
                let (s, c) = phase.sin_cos();
                out[1 + dim] = s;
                out[2 + dim] = c;
            }
            BasisSet::LatticeIndicators { dim, n, x0, inv_step } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let m = 2 * n + 1;
                let mut idx = 0usize;
                for j in 0..*dim {
                    let k = ((x[j] - x0[j]) * inv_step[j]).round() as i64 + *n as i64;
                    if k < 0 || k >= m as i64 {
                        return; // off the grid: all indicators vanish
                    }
                    idx = idx * m + k as usize;
                }
                out[idx] = 1.0;
            }
            BasisSet::Custom { funcs, .. } => {
                for (f, v) in funcs.iter().zip(out.iter_mut()) {
                    *v = f(t, x);
                }
            }
        }
    }
}

/// Cap on materialized increment codes (bytes).
const MAX_CODE_BYTES: usize = 2_000_000_000;

/// Simulated (or exhaustively enumerated) trinomial paths. Increments are
/// stored as ternary codes; states are reconstructed on demand from the
/// recursion `X_{i+1} = X_i + sqrt(h) sigma0 xi^{i+1}`.
pub struct PathEnsemble {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub h: f64,
    pub x0: Vec<f64>,
    spec: TrinomialSpec,
    /// `paths x steps x dim` ternary codes, path-major.
    codes: Vec<i8>,
    /// Present for exhaustive ensembles: exact path probabilities.
    pub weights: Option<Vec<f64>>,
}

impl PathEnsemble {
    #[inline]
    pub fn code(&self, path: usize, step: usize, comp: usize) -> i8 {
        self.codes[(path * self.steps + step) * self.dim + comp]
    }

    pub fn step_codes(&self, path: usize, step: usize) -> &[i8] {
        let base = (path * self.steps + step) * self.dim;
        &self.codes[base..base + self.dim]
    }

    pub fn spec(&self) -> &TrinomialSpec {
        &self.spec
    }

    /// Weight of one path: `1/L` for sampled ensembles, the exact product
    /// probability for exhaustive ones.
    #[inline]
    pub fn weight(&self, path: usize) -> f64 {
        match &self.weights {
            Some(w) => w[path],
            None => 1.0 / self.paths as f64,
        }
    }

    /// Terminal states `X_n`, path-major `paths x dim`.
    pub fn terminal_states(&self) -> Vec<f64> {
        let d = self.dim;
        let scale = self.h.sqrt() / self.spec.p().sqrt();
        let diag: Vec<f64> = match self.spec.sigma0_diag() {
            Some(v) => v.iter().map(|s| s * scale).collect(),
            None => Vec::new(),
        };
        let mut states = vec![0.0; self.paths * d];
        states.par_chunks_mut(d).enumerate().for_each(|(path, x)| {
            x.copy_from_slice(&self.x0);
            for step in 0..self.steps {
                let codes = self.step_codes(path, step);
                if diag.is_empty() {
                    let xi: Vec<f64> =
                        codes.iter().map(|&c| c as f64 / self.spec.p().sqrt()).collect();
                    let shift = self.spec.sigma0().matvec(&xi);
                    for j in 0..d {
                        x[j] += self.h.sqrt() * shift[j];
                    }
                } else {
                    for j in 0..d {
                        x[j] += diag[j] * codes[j] as f64;
                    }
                }
            }
        });
        states
    }

    /// Full state array `paths x (steps+1) x dim`; intended for small
    /// ensembles and tests. Uses the same per-step arithmetic as
    /// [`PathEnsemble::terminal_states`], so the recursion holds bit-exactly.
    pub fn all_states(&self) -> Vec<f64> {
        let d = self.dim;
        let scale = self.h.sqrt() / self.spec.p().sqrt();
        let diag: Vec<f64> = match self.spec.sigma0_diag() {
            Some(v) => v.iter().map(|s| s * scale).collect(),
            None => Vec::new(),
        };
        let mut states = vec![0.0; self.paths * (self.steps + 1) * d];
        for path in 0..self.paths {
            let mut x = self.x0.clone();
            states[path * (self.steps + 1) * d..][..d].copy_from_slice(&x);
            for step in 0..self.steps {
                let codes = self.step_codes(path, step);
                if diag.is_empty() {
                    let xi: Vec<f64> =
                        codes.iter().map(|&c| c as f64 / self.spec.p().sqrt()).collect();
                    let shift = self.spec.sigma0().matvec(&xi);
                    for j in 0..d {
                        x[j] += self.h.sqrt() * shift[j];
                    }
                } else {
                    for j in 0..d {
                        x[j] += diag[j] * codes[j] as f64;
                    }
                }
                states[(path * (self.steps + 1) + step + 1) * d..][..d].copy_from_slice(&x);
            }
        }
        states
    }
}

impl PathEnsemble {
    /// Builds an ensemble from externally supplied ternary codes
    /// (`paths x steps x dim`, path-major), e.g. a forced deterministic
    /// stream in tests, with optional exact path weights.
    pub fn from_codes(
        params: &MonotonicityParams,
        x0: &[f64],
        horizon: f64,
        steps: usize,
        codes: Vec<i8>,
        weights: Option<Vec<f64>>,
    ) -> Result<PathEnsemble> {
        let d = x0.len();
        if steps == 0 || codes.len() % (steps * d) != 0 || codes.is_empty() {
            return Err(Error::InvalidArgument("codes must hold paths*steps*dim entries".into()));
        }
        let paths = codes.len() / (steps * d);
        if let Some(w) = &weights {
            if w.len() != paths {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {paths} paths",
                    w.len()
                )));
            }
        }
        if codes.iter().any(|c| !(-1..=1).contains(c)) {
            return Err(Error::InvalidArgument("codes must lie in {-1, 0, +1}".into()));
        }
        Ok(PathEnsemble {
            seed: 0,
            paths,
            steps,
            dim: d,
            h: horizon / steps as f64,
            x0: x0.to_vec(),
            spec: TrinomialSpec::from_params(params)?,
            codes,
            weights,
        })
    }
}

/// Simulates `L` independent paths with the counter-based stream keyed by
/// `(seed, path, step, component)`; identical output for identical seed, for
/// any worker-thread count.
pub fn simulate_paths(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    x0: &[f64],
    n: usize,
    l: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if l == 0 || n == 0 {
        return Err(Error::InvalidArgument("need at least one path and one step".into()));
    }
    if x0.len() != problem.dim {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries for d={}",
            x0.len(),
            problem.dim
        )));
    }
    let d = problem.dim;
    let bytes = l.checked_mul(n).and_then(|v| v.checked_mul(d));
    if bytes.map_or(true, |b| b > MAX_CODE_BYTES) {
        return Err(Error::BudgetExceeded(format!(
            "L*n*d = {l}*{n}*{d} increment codes exceed the materialization budget"
        )));
    }
    let spec = TrinomialSpec::from_params(params)?;
    let mut codes = vec![0i8; l * n * d];
    let proto = XiStream::new(seed, &spec);
    codes.par_chunks_mut(n * d).enumerate().for_each_init(
        || proto.clone(),
        |stream, (path, path_codes)| {
            stream.seek(path as u64, 0);
            for step in 0..n {
                stream.fill_codes(&mut path_codes[step * d..(step + 1) * d]);
            }
        },
    );
    Ok(PathEnsemble {
        seed,
        paths: l,
        steps: n,
        dim: d,
        h: problem.horizon / n as f64,
        x0: x0.to_vec(),
        spec,
        codes,
        weights: None,
    })
}

/// Enumerates all `3^(n d)` code sequences with exact probabilities; the
/// weighted regression then reproduces exact conditional expectations.
pub fn exhaustive_paths(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    x0: &[f64],
    n: usize,
) -> Result<PathEnsemble> {
    let d = problem.dim;
    let digits = n * d;
    if digits > 12 {
        return Err(Error::BudgetExceeded(format!(
            "3^{digits} exhaustive paths is beyond the enumeration budget"
        )));
    }
    let total = 3usize.pow(digits as u32);
    let spec = TrinomialSpec::from_params(params)?;
    let mut codes = vec![0i8; total * digits];
    let mut weights = vec![0.0; total];
    for path in 0..total {
        let mut rem = path;
        let mut w = 1.0;
        for slot in (0..digits).rev() {
            let c = (rem % 3) as i8 - 1;
            rem /= 3;
            codes[path * digits + slot] = c;
            w *= spec.code_prob(c);
        }
        weights[path] = w;
    }
    Ok(PathEnsemble {
        seed: 0,
        paths: total,
        steps: n,
        dim: d,
        h: problem.horizon / n as f64,
        x0: x0.to_vec(),
        spec,
        codes,
        weights: Some(weights),
    })
}

/// Least-squares fit of `targets` on the `l x j` design matrix `features`
/// (row-major) by normal equations; a ridge is added when the Gram
/// condition estimate exceeds `1e12`.
pub fn regress(targets: &[f64], features: &[f64], l: usize, j: usize) -> Result<Vec<f64>> {
    if targets.len() != l || features.len() != l * j {
        return Err(Error::InvalidArgument("design/target sizes are inconsistent".into()));
    }
    if l < j {
        return Err(Error::InvalidArgument(format!(
            "need at least as many samples as basis functions ({l} < {j})"
        )));
    }
    let mut gram = SymMatrix::zeros(j);
    let mut rhs = vec![0.0; j];
    for path in 0..l {
        let row = &features[path * j..(path + 1) * j];
        for a in 0..j {
            if row[a] == 0.0 {
                continue;
            }
            for b in a..j {
                let v = gram.get(a, b) + row[a] * row[b];
                gram.set(a, b, v);
            }
            rhs[a] += row[a] * targets[path];
        }
    }
    let solver = GramSolver::new(&gram)?;
    Ok(solver.solve(&rhs))
}

/// Shared factorization of one layer's Gram matrix: exactly-zero columns are
/// dropped, the condition is estimated on the active block, and a ridge
/// `1e-10 tr(Gram)/J` is added when it exceeds the threshold.
struct GramSolver {
    chol: LowerTriangular,
    active: Vec<usize>,
    j: usize,
    pub ridge_used: bool,
}

impl GramSolver {
    fn new(gram: &SymMatrix) -> Result<Self> {
        let j = gram.dim();
        let active: Vec<usize> = (0..j).filter(|&a| gram.get(a, a) > 0.0).collect();
        if active.is_empty() {
            return Err(Error::DegenerateRegression("design matrix is identically zero".into()));
        }
        let k = active.len();
        let compact =
            SymMatrix::from_fn(k, |a, b| gram.get(active[a], active[b]));
        let eig = sym_eig(&compact)?;
        let max_eig = eig.eigenvalues[0];
        let min_eig = eig.min_eigenvalue();
        let needs_ridge = min_eig <= 0.0 || max_eig / min_eig > RIDGE_CONDITION;
        let trace: f64 = (0..j).map(|a| gram.get(a, a)).sum();
        let ridge = if needs_ridge { 1e-10 * trace / j as f64 } else { 0.0 };
        let regularized = if needs_ridge {
            compact.add(&SymMatrix::scaled_identity(k, ridge))?
        } else {
            compact
        };
        let chol = cholesky_lower(&regularized)?;
        Ok(GramSolver { chol, active, j, ridge_used: needs_ridge })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut compact: Vec<f64> = self.active.iter().map(|&a| rhs[a]).collect();
        self.chol.solve_forward(&mut compact);
        self.chol.solve_backward(&mut compact);
        let mut full = vec![0.0; self.j];
        for (slot, &a) in self.active.iter().enumerate() {
            full[a] = compact[slot];
        }
        full
    }
}

/// Backward-induction result for one run.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub y0: f64,
    /// Largest fitted `|E[Y]|` seen across layers.
    pub max_fitted_abs: f64,
    /// Set when a fitted value exceeded ten times the stability bound.
    pub blowup: bool,
    /// Number of layers whose Gram matrix needed the ridge term.
    pub ridge_layers: usize,
    /// Gradient estimate `D1` at the initial state (layer-0 means), for
    /// Feynman-Kac extraction.
    pub d1_at_origin: Vec<f64>,
}

/// One regression Monte Carlo pass over the ensemble.
///
/// Layer `n` holds `g(X_n)`; going down, each conditional expectation
/// (`K0`, the `d` gradient kernels when the generator reads the gradient,
/// and one per masked Hessian entry) is regressed on the basis evaluated at
/// `(t_i, X_i)`, and the update `Y_i = E_i[Y] + h F(...)` is applied per
/// path. At layer 0 all paths share `x0`, so the regression degenerates to
/// (weighted) means.
pub fn backward_induct(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    ensemble: &PathEnsemble,
    basis: &BasisSet,
) -> Result<BackwardSolution> {
    let d = problem.dim;
    let l = ensemble.paths;
    let n = ensemble.steps;
    let j = basis.len();
    if ensemble.dim != d {
        return Err(Error::DimensionMismatch(format!(
            "ensemble dimension {} vs problem {d}",
            ensemble.dim
        )));
    }
    if l < j && ensemble.weights.is_none() {
        return Err(Error::InvalidArgument(format!(
            "need at least as many paths as basis functions ({l} < {j})"
        )));
    }
    let spec = ensemble.spec();
    if (spec.p() - params.p).abs() > 1e-15
        || spec
            .sigma0()
            .as_slice()
            .iter()
            .zip(params.sigma0.as_slice())
            .any(|(a, b)| (a - b).abs() > 1e-15)
    {
        return Err(Error::InvalidArgument(
            "ensemble was simulated under different scheme parameters".into(),
        ));
    }
    let f = ProblemF::new(problem, spec.sigma0())?;
    let h = ensemble.h;
    let p = spec.p();
    let sqrt_p = p.sqrt();
    let inv_sqrt_h = 1.0 / h.sqrt();
    let entries = problem.mask.unique_entries(d);
    let use_k1 = problem.uses_gradient;
    let nk1 = if use_k1 { d } else { 0 };
    let nt = 1 + nk1 + entries.len();
    let sd: Option<Vec<f64>> = spec.sigma0_diag().map(|v| v.to_vec());
    let scale_step: Vec<f64> = match &sd {
        Some(diag) => diag.iter().map(|s| s * h.sqrt() / sqrt_p).collect(),
        None => spec.sigma0().as_slice().iter().map(|v| v * h.sqrt() / sqrt_p).collect(),
    };
    let k2_scale = 1.0 / ((1.0 - p) * h);
    let stability_bound = (1.0 + problem.lipschitz_bound * h).powi(n as i32)
        * (problem.terminal_bound + problem.horizon * problem.source_bound);

    // Layer n: states and terminal values.
    let mut x = ensemble.terminal_states();
    let mut y = vec![0.0; l];
    y.par_chunks_mut(1).enumerate().for_each(|(path, v)| {
        v[0] = (problem.terminal)(&x[path * d..(path + 1) * d]);
    });

    let mut design = vec![0.0; l * j];
    let mut max_fitted: f64 = 0.0;
    let mut ridge_layers = 0usize;

    for i in (0..n).rev() {
        let t = i as f64 * h;
        // Step back: X_i = X_{i+1} - sqrt(h) sigma0 xi^{i+1}.
        x.par_chunks_mut(d).enumerate().for_each(|(path, xs)| {
            let codes = ensemble.step_codes(path, i);
            match &sd {
                Some(_) => {
                    for jj in 0..d {
                        xs[jj] -= scale_step[jj] * codes[jj] as f64;
                    }
                }
                None => {
                    for r in 0..d {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += scale_step[r * d + c] * codes[c] as f64;
                        }
                        xs[r] -= s;
                    }
                }
            }
        });

        if i == 0 {
            // Degenerate layer: all paths share x0; plain (weighted) means.
            let sums = deterministic_chunk_sum(l, nt, |path, out| {
                let w = ensemble.weight(path);
                accumulate_targets(
                    ensemble, spec, &entries, use_k1, path, i, w * y[path], k2_scale, sqrt_p,
                    inv_sqrt_h, &sd, out,
                );
            });
            let fit0 = sums[0];
            let (z, gamma) = assemble_estimates(d, &entries, use_k1, &sums);
            let gv = GammaView::new(&gamma, problem.mask);
            let y0 = fit0 + h * f.eval(t, &ensemble.x0, fit0, &z, &gv);
            max_fitted = max_fitted.max(fit0.abs());
            return Ok(BackwardSolution {
                y0,
                max_fitted_abs: max_fitted,
                blowup: max_fitted > 10.0 * stability_bound,
                ridge_layers,
                d1_at_origin: z,
            });
        }

        // Design rows at (t_i, X_i).
        design.par_chunks_mut(j).enumerate().for_each(|(path, row)| {
            basis.eval_row(t, &x[path * d..(path + 1) * d], row);
        });

        // Gram (upper triangle) and nt right-hand sides, in fixed chunk order.
        let gram_len = j * (j + 1) / 2;
        let partial_len = gram_len + nt * j;
        let acc = deterministic_chunk_sum(l, partial_len, |path, out| {
            let row = &design[path * j..(path + 1) * j];
            let w = ensemble.weight(path);
            let (gram_part, rhs_part) = out.split_at_mut(gram_len);
            let mut idx = 0;
            for a in 0..j {
                let ra = w * row[a];
                if ra == 0.0 {
                    idx += j - a;
                    continue;
                }
                for b in a..j {
                    gram_part[idx] += ra * row[b];
                    idx += 1;
                }
            }
            // Per-target coefficients w * Y * K_k, scattered over the row.
            let mut coefs = [0.0f64; 64];
            accumulate_target_coefs(
                ensemble, spec, &entries, use_k1, path, i, w * y[path], k2_scale, sqrt_p,
                inv_sqrt_h, &sd, &mut coefs[..nt],
            );
            for (k, &ck) in coefs[..nt].iter().enumerate() {
                if ck == 0.0 {
                    continue;
                }
                let dst = &mut rhs_part[k * j..(k + 1) * j];
                for (dv, rv) in dst.iter_mut().zip(row.iter()) {
                    *dv += ck * rv;
                }
            }
        });
        let (gram_flat, rhs_flat) = acc.split_at(gram_len);
        let mut gram = SymMatrix::zeros(j);
        let mut idx = 0;
        for a in 0..j {
            for b in a..j {
                gram.set(a, b, gram_flat[idx]);
                idx += 1;
            }
        }
        let solver = GramSolver::new(&gram).map_err(|e| {
            Error::DegenerateRegression(format!("layer {i}: {e}"))
        })?;
        if solver.ridge_used {
            ridge_layers += 1;
        }
        let coefs: Vec<Vec<f64>> =
            (0..nt).map(|k| solver.solve(&rhs_flat[k * j..(k + 1) * j])).collect();

        // Fitted values and the per-path update.
        let layer_max = y
            .par_chunks_mut(1)
            .enumerate()
            .map_init(
                || (vec![0.0f64; nt], SymMatrix::zeros(d), Vec::<f64>::with_capacity(d)),
                |(fitted, gamma, z), (path, yv)| {
                    let row = &design[path * j..(path + 1) * j];
                    for (k, c) in coefs.iter().enumerate() {
                        fitted[k] = dot(row, c);
                    }
                    let fit0 = fitted[0];
                    z.clear();
                    if use_k1 {
                        z.extend_from_slice(&fitted[1..1 + d]);
                    } else {
                        z.resize(d, 0.0);
                    }
                    for (slot, &(a, b)) in entries.iter().enumerate() {
                        gamma.set(a, b, fitted[1 + nk1 + slot]);
                    }
                    let gv = GammaView::new(gamma, problem.mask);
                    let xs = &x[path * d..(path + 1) * d];
                    yv[0] = fit0 + h * f.eval(t, xs, fit0, z, &gv);
                    fit0.abs()
                },
            )
            .reduce(|| 0.0f64, f64::max);
        max_fitted = max_fitted.max(layer_max);
    }
    unreachable!("loop returns at layer 0");
}

/// Accumulates `coef * K_k` weighted target coefficients for one path-step:
/// slot 0 is `K0`, slots `1..1+d` the gradient kernels (when used), then one
/// slot per masked Hessian entry.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_target_coefs(
    ensemble: &PathEnsemble,
    spec: &TrinomialSpec,
    entries: &[(usize, usize)],
    use_k1: bool,
    path: usize,
    step: usize,
    wy: f64,
    k2_scale: f64,
    sqrt_p: f64,
    inv_sqrt_h: f64,
    sd: &Option<Vec<f64>>,
    out: &mut [f64],
) {
    let d = ensemble.dim;
    let p = spec.p();
    let codes = ensemble.step_codes(path, step);
    out[0] = wy;
    let nk1 = if use_k1 { d } else { 0 };
    match sd {
        Some(diag) => {
            if use_k1 {
                for jj in 0..d {
                    out[1 + jj] = wy * codes[jj] as f64 / sqrt_p * inv_sqrt_h / diag[jj];
                }
            }
            for (slot, &(a, b)) in entries.iter().enumerate() {
                let val = if a == b {
                    // 2p (xi^2 - 1) / ((1-p) h s^2) with xi^2 = c^2/p.
                    let c2 = (codes[a] * codes[a]) as f64;
                    2.0 * p * (c2 / p - 1.0) * k2_scale / (diag[a] * diag[a])
                } else {
                    (codes[a] * codes[b]) as f64 / p * (1.0 - p) * k2_scale / (diag[a] * diag[b])
                };
                out[1 + nk1 + slot] = wy * val;
            }
        }
        None => {
            let xi: Vec<f64> = codes.iter().map(|&c| c as f64 / sqrt_p).collect();
            if use_k1 {
                let k1 = spec.sigma0_inv().matvec(&xi);
                for jj in 0..d {
                    out[1 + jj] = wy * k1[jj] * inv_sqrt_h;
                }
            }
            let b_mat = SymMatrix::from_fn(d, |a, b| {
                if a == b {
                    2.0 * p * (xi[a] * xi[a] - 1.0)
                } else {
                    (1.0 - p) * xi[a] * xi[b]
                }
            });
            let full = b_mat.conjugate_by(spec.sigma0_inv().as_slice());
            for (slot, &(a, b)) in entries.iter().enumerate() {
                out[1 + nk1 + slot] = wy * full.get(a, b) * k2_scale;
            }
        }
    }
}

/// Like `accumulate_target_coefs` but adds into `out` (used for the weighted
/// means at the degenerate layer).
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_targets(
    ensemble: &PathEnsemble,
    spec: &TrinomialSpec,
    entries: &[(usize, usize)],
    use_k1: bool,
    path: usize,
    step: usize,
    wy: f64,
    k2_scale: f64,
    sqrt_p: f64,
    inv_sqrt_h: f64,
    sd: &Option<Vec<f64>>,
    out: &mut [f64],
) {
    let mut tmp = [0.0f64; 64];
    let nt = out.len();
    accumulate_target_coefs(
        ensemble, spec, entries, use_k1, path, step, wy, k2_scale, sqrt_p, inv_sqrt_h, sd,
        &mut tmp[..nt],
    );
    for (o, t) in out.iter_mut().zip(&tmp[..nt]) {
        *o += t;
    }
}

fn assemble_estimates(
    d: usize,
    entries: &[(usize, usize)],
    use_k1: bool,
    sums: &[f64],
) -> (Vec<f64>, SymMatrix) {
    let nk1 = if use_k1 { d } else { 0 };
    let z = if use_k1 { sums[1..1 + d].to_vec() } else { vec![0.0; d] };
    let mut gamma = SymMatrix::zeros(d);
    for (slot, &(a, b)) in entries.iter().enumerate() {
        gamma.set(a, b, sums[1 + nk1 + slot]);
    }
    (z, gamma)
}

/// Parallel sum over paths with fixed-size chunks merged in chunk order, so
/// the result is independent of the worker-thread count.
fn deterministic_chunk_sum(
    l: usize,
    width: usize,
    per_path: impl Fn(usize, &mut [f64]) + Sync,
) -> Vec<f64> {
    let chunks = l.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(l);
            for path in start..end {
                per_path(path, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-(n, L, K) solver output.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub n: usize,
    pub paths: usize,
    pub repeats: usize,
    /// Mean over the repeated runs.
    pub avg: f64,
    /// Sample variance of the mean; absent for a single repeat.
    pub var_avg: Option<f64>,
    pub per_run: Vec<f64>,
    pub seconds: f64,
    pub abs_error: Option<f64>,
    /// True when any repeat saw fitted values past ten times the stability
    /// bound.
    pub blowup_flagged: bool,
}

/// Runs `K` independent regression passes with derived seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_repeats(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    x0: &[f64],
    n: usize,
    l: usize,
    k: usize,
    seed: u64,
    basis: &BasisSet,
) -> Result<RunReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one repeat".into()));
    }
    let start = Instant::now();
    let mut per_run = Vec::with_capacity(k);
    let mut blowup = false;
    for rep in 0..k {
        let rep_seed = derive_seed(seed, rep as u64);
        let ensemble = simulate_paths(problem, params, x0, n, l, rep_seed)?;
        let sol = backward_induct(problem, params, &ensemble, basis)?;
        blowup |= sol.blowup;
        per_run.push(sol.y0);
    }
    let avg = per_run.iter().sum::<f64>() / k as f64;
    let var_avg = (k > 1).then(|| {
        let sample_var =
            per_run.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / (k as f64 - 1.0);
        sample_var / k as f64
    });
    let abs_error = problem.true_solution.as_ref().map(|sol| (avg - sol(0.0, x0)).abs());
    Ok(RunReport {
        n,
        paths: l,
        repeats: k,
        avg,
        var_avg,
        per_run,
        seconds: start.elapsed().as_secs_f64(),
        abs_error,
        blowup_flagged: blowup,
    })
}
