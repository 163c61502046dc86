//! The trinomial increment law, the kernels `K0/K1/K2`, the discrete
//! derivative expectations `D0/D1/D2`, and the one-step operator.
//!
//! Each increment component takes `+1/sqrt(p)`, `-1/sqrt(p)`, `0` with
//! probabilities `p/2`, `p/2`, `1-p`, so `E[xi_i] = E[xi_i^3] = 0`,
//! `E[xi_i^2] = 1`, `E[xi_i^4] = 1/p`. A function evaluated on the shifted
//! points `x + sqrt(h) sigma0 xi` and weighted by
//!
//! ```text
//! K0 = 1,   K1 = sigma0^-1 xi / sqrt(h),
//! K2 = sigma0^-1 [ (1-p) xi xi' - (1-3p) D[xi xi'] - 2p I ] sigma0^-1 / ((1-p) h)
//! ```
//!
//! recovers its value, gradient and Hessian up to `O(h)`; both kernels have
//! exactly zero mean. Expectations run in two modes sharing one code path:
//! exact weighted sums over the full `3^d` support (lattice solver, tests)
//! and plain averages over sampled outcomes (regression Monte Carlo).

use crate::error::{Error, Result};
use crate::params::MonotonicityParams;
use crate::symmat::{cholesky_lower, spd_inverse, SymMatrix};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Which entries of the Hessian argument a generator reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityMask {
    Diagonal,
    Tridiagonal,
    Full,
}

impl SparsityMask {
    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        match self {
            SparsityMask::Diagonal => i == j,
            SparsityMask::Tridiagonal => i.abs_diff(j) <= 1,
            SparsityMask::Full => true,
        }
    }

    /// Total masked entries counting both triangles (`3d - 2` for the
    /// tridiagonal mask).
    pub fn count(&self, dim: usize) -> usize {
        match self {
            SparsityMask::Diagonal => dim,
            SparsityMask::Tridiagonal => 3 * dim - 2,
            SparsityMask::Full => dim * dim,
        }
    }

    /// Distinct entries `(i, j)` with `i <= j`, in row-major order. These are
    /// the conditional expectations a solver must actually estimate.
    pub fn unique_entries(&self, dim: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                if self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Read-only view of a Hessian estimate restricted to a mask. Generators
/// receive this instead of the raw matrix; reading an unmasked entry is a
/// contract violation caught in debug builds.
pub struct GammaView<'a> {
    mat: &'a SymMatrix,
    mask: SparsityMask,
}

impl<'a> GammaView<'a> {
    pub fn new(mat: &'a SymMatrix, mask: SparsityMask) -> Self {
        GammaView { mat, mask }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    #[inline]
    pub fn mask(&self) -> SparsityMask {
        self.mask
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(
            self.mask.contains(i, j),
            "generator read unmasked Hessian entry ({i},{j})"
        );
        self.mat.get(i, j)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius product against a symmetric matrix whose support lies
    /// inside the mask.
    pub fn frobenius_masked(&self, other: &SymMatrix) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let v = other.get(i, j);
                if v != 0.0 {
                    s += v * self.get(i, j);
                }
            }
        }
        s
    }
}

/// The nonlinearity `F(t, x, y, z, gamma)` driving the one-step operator.
pub trait SchemeNonlinearity: Sync {
    fn mask(&self) -> SparsityMask;
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], gamma: &GammaView<'_>) -> f64;
}

/// Immutable description of the increment law: weight `p`, dimension, and
/// the (positive definite) `sigma0` with its cached inverse.
#[derive(Debug, Clone)]
pub struct TrinomialSpec {
    p: f64,
    dim: usize,
    sigma0: SymMatrix,
    sigma0_inv: SymMatrix,
    /// Diagonal fast path: `Some(diag)` when `sigma0` is diagonal.
    sigma0_diag: Option<Vec<f64>>,
}

impl TrinomialSpec {
    pub fn new(p: f64, sigma0: SymMatrix) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0 / 3.0) {
            // p > 1/3 would flip the sign of the D[xi xi'] coefficient.
            return Err(Error::InvalidArgument(format!("p must lie in (0, 1/3], got {p}")));
        }
        let dim = sigma0.dim();
        cholesky_lower(&sigma0)?;
        let sigma0_inv = spd_inverse(&sigma0)?;
        // sigma0 sigma0^-1 == I within 1e-12 d.
        let mut dev = 0.0f64;
        for i in 0..dim {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            let y = sigma0.matvec(&sigma0_inv.matvec(&e));
            for j in 0..dim {
                let t = if i == j { 1.0 } else { 0.0 };
                dev += (y[j] - t) * (y[j] - t);
            }
        }
        if dev.sqrt() > 1e-12 * dim as f64 {
            return Err(Error::NumericalFailure(format!(
                "sigma0 inverse check failed: deviation {:.3e}",
                dev.sqrt()
            )));
        }
        let sigma0_diag = if sigma0.is_diagonal() { Some(sigma0.diag()) } else { None };
        Ok(TrinomialSpec { p, dim, sigma0, sigma0_inv, sigma0_diag })
    }

    pub fn from_params(params: &MonotonicityParams) -> Result<Self> {
        Self::new(params.p, params.sigma0.clone())
    }

    #[inline]
    pub fn p(&self) -> f64 {
        self.p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma0(&self) -> &SymMatrix {
        &self.sigma0
    }

    pub fn sigma0_inv(&self) -> &SymMatrix {
        &self.sigma0_inv
    }

    pub fn sigma0_diag(&self) -> Option<&[f64]> {
        self.sigma0_diag.as_deref()
    }

    /// `sigma0^2` as a symmetric matrix.
    pub fn sigma0_sq(&self) -> SymMatrix {
        let d = self.dim;
        SymMatrix::from_fn(d, |i, j| {
            (0..d).map(|k| self.sigma0.get(i, k) * self.sigma0.get(k, j)).sum()
        })
    }

    /// Probability of a single-component code (`-1`, `0`, `+1`).
    #[inline]
    pub fn code_prob(&self, code: i8) -> f64 {
        if code == 0 {
            1.0 - self.p
        } else {
            self.p / 2.0
        }
    }
}

/// One realization of the increment vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Ternary codes in `{-1, 0, +1}` per component.
    pub codes: Vec<i8>,
    /// Product of the component probabilities.
    pub probability: f64,
    /// Codes scaled by `1/sqrt(p)`.
    pub xi: Vec<f64>,
}

const MAX_ENUM_DIM: usize = 12;

/// All `3^d` outcomes with exact probabilities, in lexicographic code order
/// (`-1 < 0 < +1`, first component most significant).
pub fn enumerate_support(spec: &TrinomialSpec) -> Result<Vec<Outcome>> {
    let d = spec.dim;
    if d > MAX_ENUM_DIM {
        return Err(Error::BudgetExceeded(format!(
            "3^{d} outcomes exceeds the enumeration guard (d <= {MAX_ENUM_DIM})"
        )));
    }
    let total = 3usize.pow(d as u32);
    let inv_sqrt_p = 1.0 / spec.p.sqrt();
    let mut out = Vec::with_capacity(total);
    let mut codes = vec![-1i8; d];
    loop {
        let probability: f64 = codes.iter().map(|&c| spec.code_prob(c)).product();
        let xi: Vec<f64> = codes.iter().map(|&c| c as f64 * inv_sqrt_p).collect();
        out.push(Outcome { codes: codes.clone(), probability, xi });
        let mut k = d;
        loop {
            if k == 0 {
                return Ok(out);
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

/// Counter-based increment stream: draws are keyed by
/// `(seed, path, step, component)` so they are independent of thread
/// scheduling and can be regenerated at random access positions.
///
/// Implementation: ChaCha12 keyed by the seed, with the path index as the
/// stream id and `(step, component)` mapped to the 64-bit word position.
#[derive(Clone)]
pub struct XiStream {
    rng: ChaCha12Rng,
    dim: usize,
    /// `P(code = +1) = P(code = -1)` in 64-bit fixed point.
    threshold: u64,
    cursor_path: u64,
    cursor_step: u32,
}

impl XiStream {
    pub fn new(seed: u64, spec: &TrinomialSpec) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let rng = ChaCha12Rng::from_seed(key);
        // Exact p/2 in 64-bit fixed point keeps the +/- branches symmetric.
        let threshold = ((spec.p / 2.0) * (u64::MAX as f64)) as u64;
        XiStream { rng, dim: spec.dim, threshold, cursor_path: 0, cursor_step: 0 }
    }

    /// Positions the stream at `(path, step)`; subsequent draws consume the
    /// step's components in order.
    pub fn seek(&mut self, path: u64, step: u32) {
        self.rng.set_stream(path);
        // Each u64 draw consumes two 32-bit words.
        let words = 2u128 * (step as u128) * (self.dim as u128);
        self.rng.set_word_pos(words);
        self.cursor_path = path;
        self.cursor_step = step;
    }

    /// Draws the codes for the step the cursor points at and advances to the
    /// next step. `out` must hold `dim` entries.
    pub fn fill_codes(&mut self, out: &mut [i8]) {
        debug_assert_eq!(out.len(), self.dim);
        for c in out.iter_mut() {
            let u = self.rng.next_u64();
            *c = if u < self.threshold {
                1
            } else if u < 2 * self.threshold {
                -1
            } else {
                0
            };
        }
        self.cursor_step += 1;
    }

    pub fn cursor(&self) -> (u64, u32) {
        (self.cursor_path, self.cursor_step)
    }
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed, e.g. one per repeated run.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index.wrapping_mul(0xa076_1d64_78bd_642f))
}

/// One draw from the product law at the stream's cursor.
pub fn sample_xi(spec: &TrinomialSpec, stream: &mut XiStream) -> Outcome {
    let mut codes = vec![0i8; spec.dim];
    stream.fill_codes(&mut codes);
    let inv_sqrt_p = 1.0 / spec.p.sqrt();
    let probability = codes.iter().map(|&c| spec.code_prob(c)).product();
    let xi = codes.iter().map(|&c| c as f64 * inv_sqrt_p).collect();
    Outcome { codes, probability, xi }
}

/// `K1(xi) = sigma0^-1 xi / sqrt(h)`.
pub fn kernel_k1(spec: &TrinomialSpec, outcome: &Outcome, h: f64) -> Vec<f64> {
    let inv_sqrt_h = 1.0 / h.sqrt();
    let mut v = spec.sigma0_inv.matvec(&outcome.xi);
    for x in v.iter_mut() {
        *x *= inv_sqrt_h;
    }
    v
}

/// `K2(xi)` restricted to the masked entries (others zero).
pub fn kernel_k2(spec: &TrinomialSpec, outcome: &Outcome, h: f64, mask: SparsityMask) -> SymMatrix {
    let d = spec.dim;
    let p = spec.p;
    // B = (1-p) xi xi' - (1-3p) D[xi xi'] - 2p I, entrywise:
    //   off-diagonal: (1-p) xi_i xi_j
    //   diagonal:     2p (xi_i^2 - 1)
    let b = SymMatrix::from_fn(d, |i, j| {
        if i == j {
            2.0 * p * (outcome.xi[i] * outcome.xi[i] - 1.0)
        } else {
            (1.0 - p) * outcome.xi[i] * outcome.xi[j]
        }
    });
    let full = conj_by_sym(&b, &spec.sigma0_inv);
    let scale = 1.0 / ((1.0 - p) * h);
    SymMatrix::from_fn(d, |i, j| if mask.contains(i, j) { full.get(i, j) * scale } else { 0.0 })
}

/// `S A S` for symmetric `S` (used for the `sigma0^-1 . sigma0^-1` sandwich).
fn conj_by_sym(a: &SymMatrix, s: &SymMatrix) -> SymMatrix {
    a.conjugate_by(s.as_slice())
}

/// The discrete value/gradient/Hessian estimates of one step.
#[derive(Debug, Clone)]
pub struct StepEvaluation {
    pub d0: f64,
    pub d1: Vec<f64>,
    /// Masked entries populated; unmasked entries zero.
    pub d2: SymMatrix,
}

/// Shared accumulation core: raw code-space moments of a weighted value set.
///
/// `acc1[j] = sum w v code_j`, `acc2` over the unique masked index pairs with
/// `acc2[(i,j)] = sum w v code_i code_j`. Weights are probabilities in exact
/// mode and `1/L` in sampled mode; the transform to `D1`/`D2` is identical.
struct CodeMoments {
    d0: f64,
    acc1: Vec<f64>,
    acc2: Vec<f64>,
}

fn transform_moments(
    spec: &TrinomialSpec,
    h: f64,
    mask: SparsityMask,
    entries: &[(usize, usize)],
    m: CodeMoments,
) -> StepEvaluation {
    let d = spec.dim;
    let p = spec.p;
    let sqrt_p = p.sqrt();
    let inv_sqrt_h = 1.0 / h.sqrt();

    // D1 = sigma0^-1 E[v xi] / sqrt(h), with E[v xi] = acc1 / sqrt(p).
    let exi: Vec<f64> = m.acc1.iter().map(|a| a / sqrt_p).collect();
    let mut d1 = match spec.sigma0_diag() {
        Some(diag) => exi.iter().zip(diag).map(|(v, s)| v / s).collect(),
        None => spec.sigma0_inv.matvec(&exi),
    };
    for v in d1.iter_mut() {
        *v *= inv_sqrt_h;
    }

    // E[v xi xi'] on masked entries = acc2 / p, then
    // D2 = sigma0^-1 [ (1-p) M - (1-3p) D[M] - 2p d0 I ] sigma0^-1 / ((1-p) h).
    let scale = 1.0 / ((1.0 - p) * h);
    let mut d2 = SymMatrix::zeros(d);
    match spec.sigma0_diag() {
        Some(diag) => {
            for (&(i, j), &a2) in entries.iter().zip(m.acc2.iter()) {
                let mij = a2 / p;
                let v = if i == j {
                    2.0 * p * (mij - m.d0) * scale / (diag[i] * diag[i])
                } else {
                    (1.0 - p) * mij * scale / (diag[i] * diag[j])
                };
                d2.set(i, j, v);
            }
        }
        None => {
            // Build the bracket on the full matrix, sandwich, then mask.
            let mut bracket = SymMatrix::zeros(d);
            for (&(i, j), &a2) in entries.iter().zip(m.acc2.iter()) {
                let mij = a2 / p;
                let v = if i == j { 2.0 * p * (mij - m.d0) } else { (1.0 - p) * mij };
                bracket.set(i, j, v);
            }
            // Off-mask second moments are still needed for a correct
            // sandwich when sigma0 has off-diagonal structure; the masked
            // evaluation modes only support diagonal sigma0 beyond the full
            // mask, so recomputing unmasked entries is the full mask's job.
            let full = conj_by_sym(&bracket, &spec.sigma0_inv);
            for i in 0..d {
                for j in 0..d {
                    if mask.contains(i, j) {
                        d2.set(i, j, full.get(i, j) * scale);
                    }
                }
            }
        }
    }
    StepEvaluation { d0: m.d0, d1, d2 }
}

/// Exact-mode expectations: `values` are indexed consistently with
/// [`enumerate_support`] order.
pub fn step_expectations(
    spec: &TrinomialSpec,
    values: &[f64],
    h: f64,
    mask: SparsityMask,
) -> Result<StepEvaluation> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let support = enumerate_support(spec)?;
    if values.len() != support.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} values for a support of {}",
            values.len(),
            support.len()
        )));
    }
    if spec.sigma0_diag().is_none() && mask != SparsityMask::Full {
        return Err(Error::InvalidArgument(
            "masked evaluation requires diagonal sigma0; use the full mask".into(),
        ));
    }
    let entries = mask.unique_entries(spec.dim);
    let m = accumulate(spec, &entries, support.iter().map(|o| (o.probability, &o.codes[..])), values);
    Ok(transform_moments(spec, h, mask, &entries, m))
}

/// Sampled-mode expectations: plain averages over drawn outcomes.
pub fn step_expectations_sampled(
    spec: &TrinomialSpec,
    outcomes: &[Outcome],
    values: &[f64],
    h: f64,
    mask: SparsityMask,
) -> Result<StepEvaluation> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    if outcomes.len() != values.len() || outcomes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "got {} values for {} outcomes",
            values.len(),
            outcomes.len()
        )));
    }
    if spec.sigma0_diag().is_none() && mask != SparsityMask::Full {
        return Err(Error::InvalidArgument(
            "masked evaluation requires diagonal sigma0; use the full mask".into(),
        ));
    }
    let entries = mask.unique_entries(spec.dim);
    let w = 1.0 / outcomes.len() as f64;
    let m = accumulate(spec, &entries, outcomes.iter().map(|o| (w, &o.codes[..])), values);
    Ok(transform_moments(spec, h, mask, &entries, m))
}

fn accumulate<'a>(
    spec: &TrinomialSpec,
    entries: &[(usize, usize)],
    weighted_codes: impl Iterator<Item = (f64, &'a [i8])>,
    values: &[f64],
) -> CodeMoments {
    let d = spec.dim;
    let mut d0 = 0.0;
    let mut acc1 = vec![0.0; d];
    let mut acc2 = vec![0.0; entries.len()];
    for ((w, codes), &v) in weighted_codes.zip(values) {
        let wv = w * v;
        d0 += wv;
        for j in 0..d {
            let c = codes[j];
            if c != 0 {
                acc1[j] += c as f64 * wv;
            }
        }
        for (k, &(i, j)) in entries.iter().enumerate() {
            let cij = codes[i] * codes[j];
            if cij != 0 {
                acc2[k] += cij as f64 * wv;
            }
        }
    }
    CodeMoments { d0, acc1, acc2 }
}

/// One backward step: `D0 + h F(t, x, D0, D1, D2)` with `next_values` given
/// on the exact support.
pub fn one_step(
    spec: &TrinomialSpec,
    f: &dyn SchemeNonlinearity,
    t: f64,
    x: &[f64],
    h: f64,
    next_values: &[f64],
) -> Result<f64> {
    let eval = step_expectations(spec, next_values, h, f.mask())?;
    let gamma = GammaView::new(&eval.d2, f.mask());
    Ok(eval.d0 + h * f.eval(t, x, eval.d0, &eval.d1, &gamma))
}
