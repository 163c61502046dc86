//! Exact lattice solver: the full recombining trinomial tree with weighted
//! average conditional expectations, for low dimension (`d <= 3` in
//! practice; nodes grow as `(2n+1)^d`).
//!
//! Nodes live on the integer offset grid: after `i` steps each component
//! offset lies in `{-i, ..., +i}` and the coordinate is
//! `x0 + sqrt(h) sigma0 (k / sqrt(p))`. Children are looked up by index
//! arithmetic (offset +/-1/0 per component), never by coordinate matching;
//! recombination is exact because all increments are multiples of
//! `1/sqrt(p)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{epsilon_truncate, PdeProblem, ProblemF};
use crate::kernels::{
    enumerate_support, GammaView, Outcome, SchemeNonlinearity, SparsityMask, TrinomialSpec,
};
use crate::params::{build_params, check_monotone_coefficient, MonotonicityParams};
use crate::symmat::SymMatrix;

/// Cap on the values held by a single layer; two layers are alive at once.
const MAX_LAYER_VALUES: usize = 48_000_000;

/// One time slice of the tree.
#[derive(Debug, Clone)]
pub struct LatticeLayer {
    pub time_index: usize,
    /// `(2 i + 1)^d` values in row-major offset order.
    pub values: Vec<f64>,
    pub origin: Vec<f64>,
    /// `sqrt(h) sigma0 / sqrt(p)`, row-major `d x d`: the map from integer
    /// offsets to coordinate displacements.
    pub step: Vec<f64>,
}

impl LatticeLayer {
    pub fn per_axis(&self) -> usize {
        2 * self.time_index + 1
    }

    /// Decodes a row-major node index into its integer offset vector.
    pub fn offsets(&self, node: usize) -> Vec<i64> {
        let d = self.origin.len();
        let m = self.per_axis();
        let i = self.time_index as i64;
        let mut rem = node;
        let mut k = vec![0i64; d];
        for j in (0..d).rev() {
            k[j] = (rem % m) as i64 - i;
            rem /= m;
        }
        k
    }

    pub fn coordinate(&self, node: usize) -> Vec<f64> {
        let d = self.origin.len();
        let k = self.offsets(node);
        let mut x = self.origin.clone();
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += self.step[r * d + c] * k[c] as f64;
            }
            x[r] += s;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeWarning {
    /// The runtime monotone-coefficient check failed at this step size.
    NonMonotoneStep { h: f64 },
    /// The computed field exceeded the a-priori stability bound.
    StabilityExceeded { max_abs: f64, bound: f64 },
}

#[derive(Debug, Clone)]
pub struct TreeSolution {
    /// `u_h(0, x0)`.
    pub value: f64,
    /// Max of `|Y|` over all nodes and layers.
    pub max_abs: f64,
    /// `(1 + C h)^n (||g|| + T ||G(.,0,0,0)||)` with the declared constants.
    pub stability_bound: f64,
    pub warnings: Vec<TreeWarning>,
    /// All layers from terminal to root, newest first, when requested.
    pub field: Option<Vec<LatticeLayer>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TreeOptions {
    pub keep_field: bool,
}

/// Backward induction over the full tree. Deterministic: node reductions run
/// in a fixed order, so identical inputs give bit-identical values for any
/// worker-thread count.
pub fn solve_tree(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    x0: &[f64],
    n: usize,
) -> Result<TreeSolution> {
    solve_tree_with(problem, params, x0, n, TreeOptions::default())
}

pub fn solve_tree_with(
    problem: &PdeProblem,
    params: &MonotonicityParams,
    x0: &[f64],
    n: usize,
    options: TreeOptions,
) -> Result<TreeSolution> {
    let d = problem.dim;
    if x0.len() != d {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries for d={d}", x0.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one time step".into()));
    }
    let per_axis = 2 * n + 1;
    if per_axis.checked_pow(d as u32).filter(|&v| v <= MAX_LAYER_VALUES).is_none() {
        return Err(Error::BudgetExceeded(format!(
            "(2n+1)^d = {per_axis}^{d} exceeds the layer budget of {MAX_LAYER_VALUES} nodes"
        )));
    }

    let spec = TrinomialSpec::from_params(params)?;
    let f = ProblemF::new(problem, spec.sigma0())?;
    let h = problem.horizon / n as f64;

    let mut warnings = Vec::new();
    let mono = monotone_check_at(params, problem, h)?;
    if !mono {
        warnings.push(TreeWarning::NonMonotoneStep { h });
    }

    // Map from integer offsets to displacements.
    let scale = h.sqrt() / params.p.sqrt();
    let step: Vec<f64> = spec.sigma0().as_slice().iter().map(|v| v * scale).collect();

    let layer_size = |i: usize| (2 * i + 1usize).pow(d as u32);

    // Terminal layer.
    let mut current: Vec<f64> = {
        let mut vals = vec![0.0; layer_size(n)];
        let m = 2 * n + 1;
        vals.par_iter_mut().enumerate().for_each_init(
            || Vec::with_capacity(d),
            |buf, (node, v)| {
                node_coordinate(node, n, m, d, &step, x0, buf);
                *v = (problem.terminal)(buf);
            },
        );
        vals
    };
    let mut max_abs = current.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut field: Option<Vec<LatticeLayer>> = options.keep_field.then(|| {
        vec![LatticeLayer {
            time_index: n,
            values: current.clone(),
            origin: x0.to_vec(),
            step: step.clone(),
        }]
    });

    let fast = spec.sigma0_diag().is_some() && problem.mask == SparsityMask::Diagonal && d <= 3;
    let support = if fast { Vec::new() } else { enumerate_support(&spec)? };
    let entries = problem.mask.unique_entries(d);

    for i in (0..n).rev() {
        let t = i as f64 * h;
        let mut next = vec![0.0; layer_size(i)];
        if fast {
            fast_diagonal_layer(&spec, &f, problem.mask, t, h, i, d, &current, &mut next, &step, x0);
        } else {
            generic_layer(
                &spec, &f, t, h, i, d, &support, &entries, problem.mask, &current, &mut next,
                &step, x0,
            );
        }
        current = next;
        let layer_max = current.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        max_abs = max_abs.max(layer_max);
        if let Some(stack) = field.as_mut() {
            stack.push(LatticeLayer {
                time_index: i,
                values: current.clone(),
                origin: x0.to_vec(),
                step: step.clone(),
            });
        }
    }

    let c = problem.lipschitz_bound;
    let stability_bound = (1.0 + c * h).powi(n as i32)
        * (problem.terminal_bound + problem.horizon * problem.source_bound);
    if max_abs > stability_bound {
        warnings.push(TreeWarning::StabilityExceeded { max_abs, bound: stability_bound });
    }
    debug_assert!(
        max_abs <= stability_bound,
        "stability bound violated: {max_abs} > {stability_bound}"
    );

    Ok(TreeSolution { value: current[0], max_abs, stability_bound, warnings, field })
}

/// Truncates the generator by `eps` and solves the resulting tree. When no
/// parameters are supplied they are rebuilt from the truncated bounds.
pub fn solve_tree_truncated(
    problem: &PdeProblem,
    eps: f64,
    params: Option<&MonotonicityParams>,
    x0: &[f64],
    n: usize,
) -> Result<TreeSolution> {
    let truncated = epsilon_truncate(problem, eps, &SymMatrix::identity(problem.dim))?;
    match params {
        Some(p) => solve_tree(&truncated, p, x0, n),
        None => {
            let built = build_params(&truncated.bounds, &SymMatrix::identity(problem.dim))?;
            solve_tree(&truncated, &built, x0, n)
        }
    }
}

/// Evaluates the runtime monotonicity check at both diagonal-bound
/// endpoints; mixed interior configurations are covered because the
/// per-outcome worst case is attained at an endpoint in each component.
pub fn monotone_check_at(
    params: &MonotonicityParams,
    problem: &PdeProblem,
    h: f64,
) -> Result<bool> {
    let lo = vec![params.alpha_lo; params.dim];
    let hi = vec![params.alpha_hi; params.dim];
    Ok(check_monotone_coefficient(params, &lo, h, problem.lipschitz_bound)?
        && check_monotone_coefficient(params, &hi, h, problem.lipschitz_bound)?)
}

fn node_coordinate(
    node: usize,
    i: usize,
    m: usize,
    d: usize,
    step: &[f64],
    x0: &[f64],
    buf: &mut Vec<f64>,
) {
    let off = i as i64;
    let mut rem = node;
    let mut k = [0i64; 8];
    for j in (0..d).rev() {
        k[j] = (rem % m) as i64 - off;
        rem /= m;
    }
    buf.clear();
    for r in 0..d {
        let mut s = x0[r];
        for c in 0..d {
            s += step[r * d + c] * k[c] as f64;
        }
        buf.push(s);
    }
}

/// Generic per-node evaluation: gather the `3^d` children, accumulate the
/// code-space moments in lexicographic outcome order, transform, apply `F`.
#[allow(clippy::too_many_arguments)]
fn generic_layer(
    spec: &TrinomialSpec,
    f: &ProblemF<'_>,
    t: f64,
    h: f64,
    i: usize,
    d: usize,
    support: &[Outcome],
    entries: &[(usize, usize)],
    mask: SparsityMask,
    child: &[f64],
    out: &mut [f64],
    step: &[f64],
    x0: &[f64],
) {
    let m_child = 2 * (i + 1) + 1;
    let m = 2 * i + 1;
    let mut strides = vec![1usize; d];
    for j in (0..d.saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * m_child;
    }
    let rel: Vec<isize> = support
        .iter()
        .map(|o| {
            o.codes
                .iter()
                .zip(&strides)
                .map(|(&c, &s)| c as isize * s as isize)
                .sum::<isize>()
        })
        .collect();
    let p = spec.p();
    let sqrt_p = p.sqrt();
    let inv_sqrt_h = 1.0 / h.sqrt();
    let k2_scale = 1.0 / ((1.0 - p) * h);
    let diag = spec.sigma0_diag().map(|v| v.to_vec());

    out.par_iter_mut().enumerate().for_each_init(
        || {
            (
                Vec::<f64>::with_capacity(d),
                vec![0.0f64; d],
                vec![0.0f64; entries.len()],
                SymMatrix::zeros(d),
                Vec::<f64>::with_capacity(d),
            )
        },
        |(xbuf, acc1, acc2, d2, d1), (node, v)| {
            // Base child index: offsets shifted by +1 per axis.
            let mut rem = node;
            let mut base = 0usize;
            for j in (0..d).rev() {
                let kj = rem % m;
                rem /= m;
                base += (kj + 1) * strides[j];
            }
            let mut d0 = 0.0;
            acc1.iter_mut().for_each(|a| *a = 0.0);
            acc2.iter_mut().for_each(|a| *a = 0.0);
            for (o, &r) in support.iter().zip(rel.iter()) {
                let idx = (base as isize + r) as usize;
                let wv = o.probability * child[idx];
                d0 += wv;
                for j in 0..d {
                    let c = o.codes[j];
                    if c != 0 {
                        acc1[j] += c as f64 * wv;
                    }
                }
                for (k, &(a, b)) in entries.iter().enumerate() {
                    let cij = o.codes[a] * o.codes[b];
                    if cij != 0 {
                        acc2[k] += cij as f64 * wv;
                    }
                }
            }
            // Transform to D1 / D2.
            d1.clear();
            match &diag {
                Some(sd) => {
                    for j in 0..d {
                        d1.push(acc1[j] / sqrt_p * inv_sqrt_h / sd[j]);
                    }
                    for (k, &(a, b)) in entries.iter().enumerate() {
                        let mij = acc2[k] / p;
                        let val = if a == b {
                            2.0 * p * (mij - d0) * k2_scale / (sd[a] * sd[a])
                        } else {
                            (1.0 - p) * mij * k2_scale / (sd[a] * sd[b])
                        };
                        d2.set(a, b, val);
                    }
                }
                None => {
                    let exi: Vec<f64> = acc1.iter().map(|a| a / sqrt_p).collect();
                    let mut g = spec.sigma0_inv().matvec(&exi);
                    g.iter_mut().for_each(|v| *v *= inv_sqrt_h);
                    d1.extend_from_slice(&g);
                    let mut bracket = SymMatrix::zeros(d);
                    for (k, &(a, b)) in entries.iter().enumerate() {
                        let mij = acc2[k] / p;
                        let val = if a == b { 2.0 * p * (mij - d0) } else { (1.0 - p) * mij };
                        bracket.set(a, b, val);
                    }
                    let full = bracket.conjugate_by(spec.sigma0_inv().as_slice());
                    for a in 0..d {
                        for b in 0..d {
                            if mask.contains(a, b) {
                                d2.set(a, b, full.get(a, b) * k2_scale);
                            }
                        }
                    }
                }
            }
            node_coordinate(node, i, m, d, step, x0, xbuf);
            let gamma = GammaView::new(d2, mask);
            *v = d0 + h * f.eval(t, xbuf, d0, d1, &gamma);
        },
    );
}

/// Row-factorized evaluation for diagonal `sigma0` and diagonal mask,
/// `d <= 3`: the last axis is contracted by three sliding 3-tap stencils
/// shared across the `3^(d-1)` leading-axis code combinations.
#[allow(clippy::too_many_arguments)]
fn fast_diagonal_layer(
    spec: &TrinomialSpec,
    f: &ProblemF<'_>,
    mask: SparsityMask,
    t: f64,
    h: f64,
    i: usize,
    d: usize,
    child: &[f64],
    out: &mut [f64],
    step: &[f64],
    x0: &[f64],
) {
    let p = spec.p();
    let w_side = p / 2.0;
    let w_mid = 1.0 - p;
    let m = 2 * i + 1;
    let m_child = m + 2;
    let sd = spec.sigma0_diag().expect("fast path requires diagonal sigma0").to_vec();
    let sqrt_p = p.sqrt();
    let inv_sqrt_h = 1.0 / h.sqrt();
    let k2_scale = 1.0 / ((1.0 - p) * h);

    // Leading-axis code combinations with their weights and child offsets.
    let lead = d - 1;
    let mut child_strides = vec![1usize; d];
    for j in (0..d - 1).rev() {
        child_strides[j] = child_strides[j + 1] * m_child;
    }
    let mut combos: Vec<(f64, [i8; 2], isize)> = Vec::new();
    if lead == 0 {
        combos.push((1.0, [0, 0], 0));
    } else {
        let mut codes = vec![-1i8; lead];
        'outer: loop {
            let w: f64 = codes.iter().map(|&c| spec.code_prob(c)).product();
            let mut arr = [0i8; 2];
            for (j, &c) in codes.iter().enumerate() {
                arr[j] = c;
            }
            let rel: isize = codes
                .iter()
                .enumerate()
                .map(|(j, &c)| c as isize * child_strides[j] as isize)
                .sum();
            combos.push((w, arr, rel));
            let mut k = lead;
            loop {
                if k == 0 {
                    break 'outer;
                }
                k -= 1;
                if codes[k] < 1 {
                    codes[k] += 1;
                    for c in codes[k + 1..].iter_mut() {
                        *c = -1;
                    }
                    break;
                }
            }
        }
    }

    out.par_chunks_mut(m).enumerate().for_each_init(
        || (vec![0.0f64; 7 * m], Vec::<f64>::with_capacity(d)),
        |(scratch, xbuf), (row, out_row)| {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            let (acc0, rest) = scratch.split_at_mut(m);
            let (acc1a, rest) = rest.split_at_mut(m);
            let (acc2a, rest) = rest.split_at_mut(m);
            let (acc1b, rest) = rest.split_at_mut(m);
            let (acc2b, rest) = rest.split_at_mut(m);
            let (acc1c, acc2c) = rest.split_at_mut(m);

            // Leading offsets of this parent row.
            let mut rem = row;
            let mut lead_k = [0usize; 2];
            for j in (0..d - 1).rev() {
                lead_k[j] = rem % m;
                rem /= m;
            }
            // Base child row: leading offsets shifted by +1, last axis at 0.
            let mut base = 0usize;
            for j in 0..d - 1 {
                base += (lead_k[j] + 1) * child_strides[j];
            }

            for &(w, arr, rel) in &combos {
                let start = (base as isize + rel) as usize;
                let row_vals = &child[start..start + m_child];
                let lead_weight_a = if d >= 2 { arr[0] } else { 0 };
                let lead_weight_b = if d >= 3 { arr[1] } else { 0 };
                for k in 0..m {
                    let a = row_vals[k];
                    let b = row_vals[k + 1];
                    let c = row_vals[k + 2];
                    let conv_plain = w_side * (a + c) + w_mid * b;
                    let conv_c1 = w_side * (c - a);
                    let conv_c2 = w_side * (a + c);
                    let wp = w * conv_plain;
                    acc0[k] += wp;
                    acc1c[k] += w * conv_c1;
                    acc2c[k] += w * conv_c2;
                    if lead_weight_a != 0 {
                        acc1a[k] += lead_weight_a as f64 * wp;
                        acc2a[k] += wp;
                    }
                    if lead_weight_b != 0 {
                        acc1b[k] += lead_weight_b as f64 * wp;
                        acc2b[k] += wp;
                    }
                }
            }

            // Slots (a, b) hold the leading axes, slot c the last axis.
            let mut d1 = [0.0f64; 3];
            let mut d2 = SymMatrix::zeros(d);
            for (k, out_v) in out_row.iter_mut().enumerate() {
                let d0 = acc0[k];
                for axis in 0..d {
                    let (a1, a2) = if axis == d - 1 {
                        (acc1c[k], acc2c[k])
                    } else if axis == 0 {
                        (acc1a[k], acc2a[k])
                    } else {
                        (acc1b[k], acc2b[k])
                    };
                    d1[axis] = a1 / sqrt_p * inv_sqrt_h / sd[axis];
                    let mij = a2 / p;
                    d2.set(axis, axis, 2.0 * p * (mij - d0) * k2_scale / (sd[axis] * sd[axis]));
                }
                xbuf.clear();
                for r in 0..d {
                    let kk = if r == d - 1 {
                        k as i64 - i as i64
                    } else {
                        lead_k[r] as i64 - i as i64
                    };
                    xbuf.push(x0[r] + step[r * d + r] * kk as f64);
                }
                let gamma = GammaView::new(&d2, mask);
                *out_v = d0 + h * f.eval(t, xbuf, d0, &d1[..d], &gamma);
            }
        },
    );
}
