//! PDE problem descriptions and a library of generator constructors:
//! scalar interval-volatility HJB equations, an Isaacs equation with a
//! piecewise diagonal generator, quasilinear generators coming from coupled
//! FBSDEs, matrix-interval HJB equations, and a tridiagonal-Hessian family.
//! Problems with manufactured closed-form solutions carry them for
//! benchmarking.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{GammaView, SchemeNonlinearity, SparsityMask};
use crate::params::GeneratorBounds;
use crate::symmat::{cholesky_lower, frobenius, is_psd_interval, sym_eig, SymMatrix};

pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &GammaView<'_>) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SolutionFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Coefficients of a coupled forward-backward SDE
/// `dX = b(t,X,Y,Z) dt + sigma(t,X,Y) dW`, `dY = -f(t,X,Y,Z) dt + Z.dW`.
#[derive(Clone)]
pub struct FbsdeCoefficients {
    /// Brownian dimension `m` (`Z` takes values in `R^m`).
    pub m: usize,
    /// `b(t, x, y, z) -> R^d`.
    pub drift: Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> Vec<f64> + Send + Sync>,
    /// `sigma(t, x, y) -> d x m`, row-major.
    pub diffusion: Arc<dyn Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync>,
    /// `f(t, x, y, z)`.
    pub driver: DriverFn,
    /// `g(x)`.
    pub terminal: TerminalFn,
    /// Declared structural fact: `sigma sigma'` is diagonal.
    pub diagonal: bool,
}

/// A fully nonlinear parabolic terminal-value problem
/// `-du/dt - G(t, x, u, Du, D^2 u) = 0`, `u(T, .) = g`.
#[derive(Clone)]
pub struct PdeProblem {
    pub dim: usize,
    pub horizon: f64,
    pub generator: GeneratorFn,
    pub terminal: TerminalFn,
    /// Bounds of the generator derivative conjugated by the identity base.
    pub bounds: GeneratorBounds,
    pub mask: SparsityMask,
    pub true_solution: Option<SolutionFn>,
    /// Aggregate Lipschitz constant fed to the monotone-coefficient check.
    pub lipschitz_bound: f64,
    /// `sup |g|`.
    pub terminal_bound: f64,
    /// `sup |G(t, x, 0, 0, 0)|`.
    pub source_bound: f64,
    /// Whether the generator reads the gradient argument `z`; solvers skip
    /// the gradient-kernel regressions when it does not.
    pub uses_gradient: bool,
    /// Present for quasilinear problems built from FBSDE coefficients.
    pub quasilinear: Option<FbsdeCoefficients>,
    /// For generators of the form `sup over a scalar sigma^2 interval`; used
    /// by the truncation transform.
    pub scalar_interval: Option<(f64, f64)>,
}

impl PdeProblem {
    pub fn evaluate(&self, t: f64, x: &[f64], y: f64, z: &[f64], gamma: &GammaView<'_>) -> f64 {
        (self.generator)(t, x, y, z, gamma)
    }
}

/// `F(t,x,y,z,gamma) = G(t,x,y,z,gamma) - sigma0^2 : gamma / 2`, the
/// nonlinearity actually advanced by the one-step operator.
pub struct ProblemF<'a> {
    problem: &'a PdeProblem,
    /// `sigma0^2 / 2` restricted to the mask. The scheme only estimates
    /// masked Hessian entries, so `sigma0^2` must be supported there; the
    /// solvers use diagonal `sigma0`, whose square sits inside every mask.
    half_sigma0_sq: SymMatrix,
}

impl<'a> ProblemF<'a> {
    pub fn new(problem: &'a PdeProblem, sigma0: &SymMatrix) -> Result<Self> {
        if sigma0.dim() != problem.dim {
            return Err(Error::DimensionMismatch(format!(
                "sigma0 is {}-dimensional but the problem has d={}",
                sigma0.dim(),
                problem.dim
            )));
        }
        let d = problem.dim;
        let mut sq = SymMatrix::zeros(d);
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += sigma0.get(i, k) * sigma0.get(k, j);
                }
                if s != 0.0 && !problem.mask.contains(i, j) {
                    return Err(Error::InvalidArgument(
                        "sigma0^2 has support outside the generator mask".into(),
                    ));
                }
                sq.set(i, j, 0.5 * s);
            }
        }
        Ok(ProblemF { problem, half_sigma0_sq: sq })
    }
}

impl SchemeNonlinearity for ProblemF<'_> {
    fn mask(&self) -> SparsityMask {
        self.problem.mask
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], gamma: &GammaView<'_>) -> f64 {
        self.problem.evaluate(t, x, y, z, gamma) - gamma.frobenius_masked(&self.half_sigma0_sq)
    }
}

/// `sup { sigma^2 : gamma  |  lo <= sigma^2 <= hi }` with the maximizer.
///
/// Writing `hi - lo = L L'` and `L' gamma L = P diag(ghat) P'`, the value is
/// `lo : gamma + sum ghat_i^+`, attained at
/// `lo + L P diag(1{ghat_i > 0}) P' L'`.
pub fn matrix_interval_sup(
    lo: &SymMatrix,
    hi: &SymMatrix,
    gamma: &SymMatrix,
) -> Result<(f64, SymMatrix)> {
    if !is_psd_interval(lo, hi)? {
        return Err(Error::InvalidArgument(
            "matrix interval is not PSD (need lo PSD and hi - lo PSD)".into(),
        ));
    }
    if gamma.dim() != lo.dim() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", gamma.dim(), lo.dim())));
    }
    let l = cholesky_lower(&hi.sub(lo)?)?;
    let projected = l.congruence_tr(gamma);
    let eig = sym_eig(&projected)?;
    let value =
        frobenius(lo, gamma)? + eig.eigenvalues.iter().filter(|&&v| v > 0.0).sum::<f64>();
    let d = lo.dim();
    // A_hat = P diag(1{ghat > 0}) P'
    let a_hat = SymMatrix::from_fn(d, |i, j| {
        let mut s = 0.0;
        for k in 0..d {
            if eig.eigenvalues[k] > 0.0 {
                s += eig.eigenvectors[i * d + k] * eig.eigenvectors[j * d + k];
            }
        }
        s
    });
    let maximizer = lo.add(&l.congruence(&a_hat))?;
    Ok((value, maximizer))
}

/// Known drivers for the scalar-interval HJB family. The two named drivers
/// are manufactured so that `u(t,x) = sin(t + sum x_j)` solves the PDE, and
/// the constructor attaches that solution.
#[derive(Clone)]
pub enum ScalarDriver {
    /// `f(t,x,y,z) = (1/d) sum z_i - (d/2) inf_{lo <= s2 <= hi} (s2 y)` over
    /// the given squared-volatility interval.
    GradientAndValue { sq_lo: f64, sq_hi: f64 },
    /// `f(t,x) = cos(t + sum x) - (d/2) inf_{lo <= s2 <= hi} (s2 sin(t + sum x))`.
    SourceOnly { sq_lo: f64, sq_hi: f64 },
    /// Arbitrary driver; no closed-form solution attached.
    Custom(DriverFn),
}

/// Scalar interval-volatility HJB problem:
/// `G = sup_{lo <= s2 <= hi} (s2 tr gamma) / 2 - f(t,x,y,z)` with terminal
/// `g(x) = sin(T + sum x_j)`.
pub fn make_scalar_hjb(
    dim: usize,
    horizon: f64,
    sig_lo: f64,
    sig_hi: f64,
    driver: ScalarDriver,
) -> Result<PdeProblem> {
    if !(sig_lo >= 0.0 && sig_hi > sig_lo) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= sig_lo < sig_hi, got [{sig_lo}, {sig_hi}]"
        )));
    }
    let (sq_lo, sq_hi) = (sig_lo * sig_lo, sig_hi * sig_hi);
    let d = dim as f64;
    let uses_gradient = matches!(
        driver,
        ScalarDriver::GradientAndValue { .. } | ScalarDriver::Custom(_)
    );
    let (driver_fn, attach_solution): (DriverFn, bool) = match driver {
        ScalarDriver::GradientAndValue { sq_lo: flo, sq_hi: fhi } => (
            Arc::new(move |_t: f64, _x: &[f64], y: f64, z: &[f64]| {
                let sumz: f64 = z.iter().sum();
                sumz / d - (d / 2.0) * inf_scaled(flo, fhi, y)
            }),
            true,
        ),
        ScalarDriver::SourceOnly { sq_lo: flo, sq_hi: fhi } => (
            Arc::new(move |t: f64, x: &[f64], _y: f64, _z: &[f64]| {
                let phase = t + x.iter().sum::<f64>();
                phase.cos() - (d / 2.0) * inf_scaled(flo, fhi, phase.sin())
            }),
            true,
        ),
        ScalarDriver::Custom(f) => (f, false),
    };
    let gen_driver = driver_fn.clone();
    let generator: GeneratorFn = Arc::new(move |t, x, y, z, gamma: &GammaView<'_>| {
        let trg = gamma.trace();
        0.5 * sup_scaled(sq_lo, sq_hi, trg) - gen_driver(t, x, y, z)
    });
    let terminal: TerminalFn =
        Arc::new(move |x: &[f64]| (horizon + x.iter().sum::<f64>()).sin());
    let true_solution: Option<SolutionFn> = attach_solution
        .then(|| Arc::new(|t: f64, x: &[f64]| (t + x.iter().sum::<f64>()).sin()) as SolutionFn);
    // |f_y| <= (d/2) hi, |f_z| <= 1/sqrt(d); aggregate constant for the
    // monotone-coefficient check.
    let lipschitz = 3.0;
    let source_bound = 1.0 + (d / 2.0) * sq_hi;
    Ok(PdeProblem {
        dim,
        horizon,
        generator,
        terminal,
        bounds: GeneratorBounds::new(0.0, 0.5 * sq_lo, 0.5 * sq_hi, dim)?,
        mask: SparsityMask::Diagonal,
        true_solution,
        lipschitz_bound: lipschitz,
        terminal_bound: 1.0,
        source_bound,
        uses_gradient,
        quasilinear: None,
        scalar_interval: Some((sq_lo, sq_hi)),
    })
}

#[inline]
fn sup_scaled(sq_lo: f64, sq_hi: f64, v: f64) -> f64 {
    // sup of s2 * v over s2 in [sq_lo, sq_hi]: linear in s2, attained at an
    // endpoint.
    if v >= 0.0 {
        sq_hi * v
    } else {
        sq_lo * v
    }
}

#[inline]
fn inf_scaled(sq_lo: f64, sq_hi: f64, v: f64) -> f64 {
    if v >= 0.0 {
        sq_lo * v
    } else {
        sq_hi * v
    }
}

/// Isaacs equation with `G(gamma) = sum_i g(gamma_ii)` for the saddle value
/// `g` of `sup_u inf_v [ (1+u+v) q / 2 - u^2/4 + v^2/4 ]`; terminal
/// `sin(T + sum x)`. No closed-form solution exists.
pub fn make_isaacs(dim: usize, horizon: f64) -> Result<PdeProblem> {
    let generator: GeneratorFn = Arc::new(move |_t, _x, _y, _z, gamma: &GammaView<'_>| {
        (0..gamma.dim()).map(|i| isaacs_piecewise(gamma.get(i, i))).sum()
    });
    let terminal: TerminalFn =
        Arc::new(move |x: &[f64]| (horizon + x.iter().sum::<f64>()).sin());
    Ok(PdeProblem {
        dim,
        horizon,
        generator,
        terminal,
        bounds: GeneratorBounds::new(0.0, 0.5, 1.0, dim)?,
        mask: SparsityMask::Diagonal,
        true_solution: None,
        lipschitz_bound: 0.0,
        terminal_bound: 1.0,
        source_bound: 0.0,
        uses_gradient: false,
        quasilinear: None,
        scalar_interval: None,
    })
}

/// The saddle value in closed form: `q - 1/4` above `q = 1`,
/// `q/2 + (q^+)^2/4 - (q^-)^2/4` on `[-1, 1]`, `q + 1/4` below `q = -1`.
pub fn isaacs_piecewise(q: f64) -> f64 {
    if q > 1.0 {
        q - 0.25
    } else if q < -1.0 {
        q + 0.25
    } else {
        let plus = q.max(0.0);
        let minus = (-q).max(0.0);
        0.5 * q + 0.25 * plus * plus - 0.25 * minus * minus
    }
}

/// Quasilinear generator assembled from FBSDE coefficients:
/// `G = (sigma sigma')(t,x,y) : gamma / 2 + b(t,x,y, sigma'z) . z
///      + f(t,x,y, sigma'z)`.
///
/// `diag_sq_range` declares the range of the diagonal entries of
/// `sigma sigma'`; non-diagonal `sigma sigma'` requires a declared `theta`.
#[allow(clippy::too_many_arguments)]
pub fn make_quasilinear(
    coeffs: FbsdeCoefficients,
    dim: usize,
    horizon: f64,
    diag_sq_range: (f64, f64),
    theta: Option<f64>,
    lipschitz_bound: f64,
    source_bound: f64,
    true_solution: Option<SolutionFn>,
) -> Result<PdeProblem> {
    let theta = match (coeffs.diagonal, theta) {
        (true, t) => t.unwrap_or(0.0),
        (false, Some(t)) => t,
        (false, None) => {
            return Err(Error::InvalidArgument(
                "non-diagonal sigma sigma' requires a declared theta bound".into(),
            ))
        }
    };
    let mask = if coeffs.diagonal { SparsityMask::Diagonal } else { SparsityMask::Full };
    let c = coeffs.clone();
    let m = coeffs.m;
    let generator: GeneratorFn = Arc::new(move |t, x, y, z, gamma: &GammaView<'_>| {
        let d = gamma.dim();
        let sigma = (c.diffusion)(t, x, y);
        debug_assert_eq!(sigma.len(), d * m);
        // Z = sigma' z.
        let mut big_z = vec![0.0; m];
        for (k, bz) in big_z.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..d {
                s += sigma[i * m + k] * z[i];
            }
            *bz = s;
        }
        // (sigma sigma') : gamma / 2 over the masked entries.
        let mut diff = 0.0;
        if c.diagonal {
            for i in 0..d {
                let mut s = 0.0;
                for k in 0..m {
                    s += sigma[i * m + k] * sigma[i * m + k];
                }
                diff += s * gamma.get(i, i);
            }
        } else {
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..m {
                        s += sigma[i * m + k] * sigma[j * m + k];
                    }
                    diff += s * gamma.get(i, j);
                }
            }
        }
        let b = (c.drift)(t, x, y, &big_z);
        let b_dot_z: f64 = b.iter().zip(z).map(|(a, b)| a * b).sum();
        0.5 * diff + b_dot_z + (c.driver)(t, x, y, &big_z)
    });
    let terminal = coeffs.terminal.clone();
    Ok(PdeProblem {
        dim,
        horizon,
        generator,
        terminal,
        bounds: GeneratorBounds::new(theta, 0.5 * diag_sq_range.0, 0.5 * diag_sq_range.1, dim)?,
        mask,
        true_solution,
        lipschitz_bound,
        terminal_bound: 1.0,
        source_bound,
        uses_gradient: true,
        quasilinear: Some(coeffs),
        scalar_interval: None,
    })
}

/// Interval sup with the gap factorization precomputed; used by the
/// matrix-interval generator on its hot path (the public
/// [`matrix_interval_sup`] re-validates the interval on every call).
#[derive(Clone)]
struct PreparedIntervalSup {
    lo: SymMatrix,
    gap_factor: crate::symmat::LowerTriangular,
}

impl PreparedIntervalSup {
    fn new(lo: &SymMatrix, hi: &SymMatrix) -> Result<Self> {
        Ok(PreparedIntervalSup {
            lo: lo.clone(),
            gap_factor: cholesky_lower(&hi.sub(lo)?)?,
        })
    }

    fn value(&self, gamma: &SymMatrix) -> Result<f64> {
        let projected = self.gap_factor.congruence_tr(gamma);
        let eig = sym_eig(&projected)?;
        Ok(frobenius(&self.lo, gamma)?
            + eig.eigenvalues.iter().filter(|&&v| v > 0.0).sum::<f64>())
    }
}

#[derive(Clone)]
pub enum MatrixDriver {
    /// Source manufactured for `u(t,x) = sin(t + w . x)`.
    Manufactured,
    Custom { f: SpaceTimeFn, source_bound: f64 },
}

/// Matrix-interval HJB problem
/// `G(t,x,gamma) = sup_{lo <= s2 <= hi} (s2 : gamma) / 2 + f(t,x)`.
///
/// With `Manufactured`, `f` is chosen so that `u(t,x) = sin(t + w . x)`
/// solves the PDE and that solution is attached.
pub fn make_matrix_hjb(
    lo: SymMatrix,
    hi: SymMatrix,
    horizon: f64,
    weights: Vec<f64>,
    driver: MatrixDriver,
    theta: f64,
) -> Result<PdeProblem> {
    let dim = lo.dim();
    if weights.len() != dim || hi.dim() != dim {
        return Err(Error::DimensionMismatch("weights/interval dimensions differ".into()));
    }
    if !is_psd_interval(&lo, &hi)? {
        return Err(Error::InvalidArgument("matrix interval is not PSD".into()));
    }
    let (f, true_solution, source_bound): (SpaceTimeFn, Option<SolutionFn>, f64) = match driver {
        MatrixDriver::Manufactured => {
            let w = weights.clone();
            let lo_f = lo.clone();
            let hi_f = hi.clone();
            let ww = SymMatrix::from_fn(dim, |i, j| w[i] * w[j]);
            let sup_pos = matrix_interval_sup(&lo_f, &hi_f, &ww)?.0;
            let sup_neg = matrix_interval_sup(&lo_f, &hi_f, &ww.scale(-1.0))?.0;
            let bound = 1.0 + 0.5 * sup_pos.abs().max(sup_neg.abs());
            let w2 = weights.clone();
            let prepared = PreparedIntervalSup::new(&lo_f, &hi_f)?;
            let f: SpaceTimeFn = Arc::new(move |t: f64, x: &[f64]| {
                let phase = t + dot(&w2, x);
                let gamma_true = ww.scale(-phase.sin());
                let sup =
                    prepared.value(&gamma_true).expect("interval validated at construction");
                -phase.cos() - 0.5 * sup
            });
            let w3 = weights.clone();
            let sol: SolutionFn = Arc::new(move |t: f64, x: &[f64]| (t + dot(&w3, x)).sin());
            (f, Some(sol), bound)
        }
        MatrixDriver::Custom { f, source_bound } => (f, None, source_bound),
    };
    let prepared_g = PreparedIntervalSup::new(&lo, &hi)?;
    let dim_g = dim;
    let generator: GeneratorFn = Arc::new(move |t, x, _y, _z, gamma: &GammaView<'_>| {
        let g = SymMatrix::from_fn(dim_g, |i, j| gamma.get(i, j));
        let sup = prepared_g.value(&g).expect("interval validated at construction");
        0.5 * sup + f(t, x)
    });
    let w4 = weights.clone();
    let hz = horizon;
    let terminal: TerminalFn = Arc::new(move |x: &[f64]| (hz + dot(&w4, x)).sin());
    let alpha_lo = lo.diag().iter().cloned().fold(f64::INFINITY, f64::min) * 0.5;
    let alpha_hi = hi.diag().iter().cloned().fold(f64::NEG_INFINITY, f64::max) * 0.5;
    Ok(PdeProblem {
        dim,
        horizon,
        generator,
        terminal,
        bounds: GeneratorBounds::new(theta, alpha_lo, alpha_hi, dim)?,
        mask: SparsityMask::Full,
        true_solution,
        lipschitz_bound: 0.0,
        terminal_bound: 1.0,
        source_bound,
        uses_gradient: false,
        quasilinear: None,
        scalar_interval: None,
    })
}

/// Tridiagonal-Hessian problem
/// `G = 3 sum gamma_ii + sum_{|i-j|=1} 1/sqrt(1 + gamma_ij^2) + f(t,x)` with
/// `f` manufactured so that `u(t,x) = sin(t + sum x)` solves the PDE.
pub fn make_tridiagonal(dim: usize, horizon: f64) -> Result<PdeProblem> {
    if dim < 2 {
        return Err(Error::InvalidArgument("tridiagonal problem needs d >= 2".into()));
    }
    let d = dim as f64;
    let generator: GeneratorFn = Arc::new(move |t, x, _y, _z, gamma: &GammaView<'_>| {
        let dd = gamma.dim();
        let mut total = 0.0;
        for i in 0..dd {
            total += 3.0 * gamma.get(i, i);
        }
        for i in 0..dd - 1 {
            let q = gamma.get(i, i + 1);
            total += 2.0 / (1.0 + q * q).sqrt();
        }
        let phase = t + x.iter().sum::<f64>();
        let s = phase.sin();
        total - phase.cos() + 3.0 * d * s - 2.0 * (d - 1.0) / (1.0 + s * s).sqrt()
    });
    let terminal: TerminalFn =
        Arc::new(move |x: &[f64]| (horizon + x.iter().sum::<f64>()).sin());
    let sol: SolutionFn = Arc::new(|t: f64, x: &[f64]| (t + x.iter().sum::<f64>()).sin());
    // The off-diagonal derivative is bounded by beta = 2/(3 sqrt(3)); a
    // tridiagonal perturbation of spectral norm up to 2 beta against a
    // diagonal of 3 needs defect theta >= 2 beta / (3 - 2 beta).
    let beta = 2.0 / (3.0 * 3.0f64.sqrt());
    let theta = 2.0 * beta / (3.0 - 2.0 * beta);
    Ok(PdeProblem {
        dim,
        horizon,
        generator,
        terminal,
        bounds: GeneratorBounds::new(theta, 3.0, 3.0, dim)?,
        mask: SparsityMask::Tridiagonal,
        true_solution: Some(sol),
        lipschitz_bound: 0.0,
        terminal_bound: 1.0,
        source_bound: 1.0 + 3.0 * d + 2.0 * (d - 1.0),
        uses_gradient: false,
        quasilinear: None,
        scalar_interval: None,
    })
}

/// Truncation transform lifting a degenerate generator away from zero.
///
/// For scalar-interval generators the squared-volatility interval's lower
/// end is raised to `eps^2` (the sup then runs over `eps <= sigma <= sig_hi`)
/// and the driver is untouched. For general generators the transform is
/// additive, `G + eps sigma0^2 : gamma`, with the declared bounds shifted by
/// the diagonal range of `eps sigma0^2`.
pub fn epsilon_truncate(problem: &PdeProblem, eps: f64, sigma0: &SymMatrix) -> Result<PdeProblem> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(problem.clone());
    }
    if let Some((sq_lo, sq_hi)) = problem.scalar_interval {
        let new_lo = sq_lo.max(eps * eps);
        if new_lo >= sq_hi {
            return Err(Error::InvalidArgument(format!(
                "eps^2 = {new_lo} reaches the upper volatility bound {sq_hi}"
            )));
        }
        let base = problem.clone();
        let inner = problem.generator.clone();
        let generator: GeneratorFn = Arc::new(move |t, x, y, z, gamma: &GammaView<'_>| {
            // Both sups are closed-form endpoint evaluations; adjust the
            // inner generator by their difference.
            let trg = gamma.trace();
            let adjust = 0.5 * (sup_scaled(new_lo, sq_hi, trg) - sup_scaled(sq_lo, sq_hi, trg));
            inner(t, x, y, z, gamma) + adjust
        });
        return Ok(PdeProblem {
            generator,
            bounds: GeneratorBounds::new(
                problem.bounds.theta,
                0.5 * new_lo,
                0.5 * sq_hi,
                problem.dim,
            )?,
            scalar_interval: Some((new_lo, sq_hi)),
            ..base
        });
    }
    if sigma0.dim() != problem.dim {
        return Err(Error::DimensionMismatch(format!(
            "sigma0 is {}-dimensional but the problem has d={}",
            sigma0.dim(),
            problem.dim
        )));
    }
    let d = problem.dim;
    let mut ssq = SymMatrix::zeros(d);
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for k in 0..d {
                s += sigma0.get(i, k) * sigma0.get(k, j);
            }
            if s != 0.0 && !problem.mask.contains(i, j) {
                return Err(Error::InvalidArgument(
                    "sigma0^2 has support outside the generator mask".into(),
                ));
            }
            ssq.set(i, j, s);
        }
    }
    let shift_lo = ssq.diag().iter().cloned().fold(f64::INFINITY, f64::min) * eps;
    let shift_hi = ssq.diag().iter().cloned().fold(f64::NEG_INFINITY, f64::max) * eps;
    let inner = problem.generator.clone();
    let ssq_gen = ssq.clone();
    let generator: GeneratorFn = Arc::new(move |t, x, y, z, gamma: &GammaView<'_>| {
        inner(t, x, y, z, gamma) + eps * gamma.frobenius_masked(&ssq_gen)
    });
    Ok(PdeProblem {
        generator,
        bounds: GeneratorBounds::new(
            problem.bounds.theta,
            problem.bounds.alpha_lo + shift_lo,
            problem.bounds.alpha_hi + shift_hi,
            problem.dim,
        )?,
        ..problem.clone()
    })
}

/// Reads the FBSDE pair `(Y, Z)` off a solved field:
/// `Y = u(t, x)` and `Z = sigma(t, x, Y)' Du(t, x)` with `Du` taken from the
/// scheme's gradient estimate.
pub fn feynman_kac_yz(
    problem: &PdeProblem,
    u_value: f64,
    du_value: &[f64],
    t: f64,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let coeffs = problem
        .quasilinear
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("problem is not quasilinear".into()))?;
    if du_value.len() != problem.dim {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries for d={}",
            du_value.len(),
            problem.dim
        )));
    }
    let sigma = (coeffs.diffusion)(t, x, u_value);
    let m = coeffs.m;
    let mut z = vec![0.0; m];
    for (k, zk) in z.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..problem.dim {
            s += sigma[i * m + k] * du_value[i];
        }
        *zk = s;
    }
    Ok((u_value, z))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Problem registry
// ---------------------------------------------------------------------------

/// A registry entry: the problem plus the benchmark defaults the CLI uses.
pub struct RegistryEntry {
    pub key: &'static str,
    pub problem: PdeProblem,
    pub x0: Vec<f64>,
    /// Direction `w` of the default trigonometric basis `sin/cos(t + w.x)`.
    pub basis_weights: Vec<f64>,
    /// Tree-solver `(p, sigma0 scale)` override reproducing the published
    /// benchmark tables where the automatic recipe demonstrably differs.
    pub params_override: Option<(f64, f64)>,
}

pub const REGISTRY_KEYS: [&str; 7] =
    ["ex6.1", "ex6.2", "ex6.3", "ex6.4", "ex6.5", "ex6.6", "ex6.8"];

/// Looks up a benchmark problem by its registry key.
pub fn lookup(key: &str) -> Result<RegistryEntry> {
    let sqrt2 = 2.0f64.sqrt();
    match key {
        "ex6.1" => {
            let problem = make_scalar_hjb(
                3,
                0.5,
                1.0,
                sqrt2,
                ScalarDriver::GradientAndValue { sq_lo: 1.0, sq_hi: 2.0 },
            )?;
            Ok(RegistryEntry {
                key: "ex6.1",
                problem,
                x0: vec![5.0, 6.0, 7.0],
                basis_weights: vec![1.0; 3],
                // The published three-dimensional table was produced with
                // p = 1/4 and sigma0 = I rather than with the automatic
                // recipe; this override reproduces it to table precision.
                params_override: Some((0.25, 1.0)),
            })
        }
        "ex6.2" => {
            let problem = make_scalar_hjb(
                12,
                0.2,
                1.0,
                sqrt2,
                ScalarDriver::SourceOnly { sq_lo: 1.0, sq_hi: 2.0 },
            )?;
            Ok(RegistryEntry {
                key: "ex6.2",
                problem,
                x0: (1..=12).map(|i| i as f64).collect(),
                basis_weights: vec![1.0; 12],
                params_override: None,
            })
        }
        "ex6.3" => {
            let horizon = 0.2;
            let problem = make_isaacs(12, horizon)?;
            let d = 12.0;
            let x0 = (1..=12)
                .map(|i| {
                    2.0 * i as f64 * std::f64::consts::PI
                        - (horizon - 0.5 * std::f64::consts::PI) / d
                })
                .collect();
            Ok(RegistryEntry {
                key: "ex6.3",
                problem,
                x0,
                basis_weights: vec![1.0; 12],
                params_override: None,
            })
        }
        "ex6.4" => Ok(RegistryEntry {
            key: "ex6.4",
            problem: fbsde_benchmark_problem(12, 0.2)?,
            x0: (2..=13).map(|i| i as f64).collect(),
            basis_weights: vec![1.0; 12],
            params_override: None,
        }),
        "ex6.5" => {
            let problem = make_scalar_hjb(
                12,
                0.2,
                0.0,
                sqrt2,
                ScalarDriver::SourceOnly { sq_lo: 0.0, sq_hi: 2.0 },
            )?;
            Ok(RegistryEntry {
                key: "ex6.5",
                problem,
                x0: (1..=12).map(|i| i as f64).collect(),
                basis_weights: vec![1.0; 12],
                params_override: None,
            })
        }
        "ex6.6" => {
            let (lo, hi) = hjb10_interval();
            let weights: Vec<f64> = (1..=10).map(|i| 1.0 / i as f64).collect();
            // theta >= 2/d records that diagonal dominance fails for this
            // generator; runs require the explicit non-monotone override.
            let problem =
                make_matrix_hjb(lo, hi, 0.2, weights.clone(), MatrixDriver::Manufactured, 2.0)?;
            Ok(RegistryEntry {
                key: "ex6.6",
                problem,
                x0: vec![2.99, 3.05, 1.54, 1.89, 2.52, 1.10, 3.21, 1.64, 1.02, 1.80],
                basis_weights: weights,
                params_override: None,
            })
        }
        "ex6.8" => Ok(RegistryEntry {
            key: "ex6.8",
            problem: make_tridiagonal(10, 0.2)?,
            x0: (1..=10).map(|i| i as f64).collect(),
            basis_weights: vec![1.0; 10],
            // The published table tracks the semilinear normalization that
            // ignores the off-diagonal defect: p = 1/3 and sigma0 = sqrt(6)
            // (so the conjugated diagonal sits at 1/2).
            params_override: Some((1.0 / 3.0, 2.449489742783178)),
        }),
        other => Err(Error::InvalidArgument(format!(
            "unknown problem key {other:?}; known keys: {}",
            REGISTRY_KEYS.join(", ")
        ))),
    }
}

/// The twelve-dimensional coupled FBSDE benchmark. The printed drift takes
/// the raw gradient as its argument; expressed against `Z = sigma' Du` this
/// is `b_i(t,x,y,Z) = cos(y + Z_i / sigma_ii(t,x,y))`, which makes
/// `u(t,x) = sin(t + sum x)` the exact solution.
fn fbsde_benchmark_problem(dim: usize, horizon: f64) -> Result<PdeProblem> {
    let d = dim as f64;
    let m = dim;
    fn sigma_scalar(x: &[f64], y: f64, d: f64) -> f64 {
        1.0 + (x.iter().sum::<f64>() / d + y).sin() / 3.0
    }
    let diffusion = Arc::new(move |_t: f64, x: &[f64], y: f64| {
        let s = sigma_scalar(x, y, d);
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            out[i * m + i] = s;
        }
        out
    });
    let drift = Arc::new(move |_t: f64, x: &[f64], y: f64, z: &[f64]| {
        let s = sigma_scalar(x, y, d);
        z.iter().map(|&zi| (y + zi / s).cos()).collect::<Vec<f64>>()
    });
    let driver: DriverFn = Arc::new(move |t: f64, x: &[f64], y: f64, z: &[f64]| {
        let s = sigma_scalar(x, y, d);
        let phase = t + x.iter().sum::<f64>();
        let zbar = z.iter().sum::<f64>() / d;
        (d / 2.0) * phase.sin() * s * s - zbar / s - d * phase.cos() * (y + phase.cos()).cos()
    });
    let terminal: TerminalFn =
        Arc::new(move |x: &[f64]| (horizon + x.iter().sum::<f64>()).sin());
    let sol: SolutionFn = Arc::new(|t: f64, x: &[f64]| (t + x.iter().sum::<f64>()).sin());
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
}

/// The printed ten-dimensional covariance interval. Rounded to two decimals
/// the printed pair loses interval-PSD-ness (the gap acquires eigenvalue
/// -0.0076), so the upper matrix ships with a +0.01 I repair, restoring a
/// minimal gap eigenvalue of about 0.0024.
pub fn hjb10_interval() -> (SymMatrix, SymMatrix) {
    let lo = hjb10_lower_printed();
    let hi = hjb10_upper_printed()
        .add(&SymMatrix::scaled_identity(10, 0.01))
        .expect("same dimension");
    (lo, hi)
}

pub fn hjb10_upper_printed() -> SymMatrix {
    let rows: [[f64; 10]; 10] = [
        [1.18, -0.35, -0.29, 0.23, -0.52, 0.09, -0.09, 0.21, 0.25, -0.03],
        [-0.35, 2.84, 0.42, -0.23, 0.00, -0.03, 0.21, -0.38, -0.25, 0.73],
        [-0.29, 0.42, 1.54, -1.17, 0.32, -0.16, -0.64, -0.63, -0.35, -0.12],
        [0.23, -0.23, -1.17, 2.54, -0.30, 0.07, 0.30, 0.97, 0.43, 0.22],
        [-0.52, 0.00, 0.32, -0.30, 1.77, 0.25, 0.09, -0.39, 0.19, 0.13],
        [0.09, -0.03, -0.16, 0.07, 0.25, 2.13, 0.23, 0.82, 0.65, 0.42],
        [-0.09, 0.21, -0.64, 0.30, 0.09, 0.23, 1.79, 0.31, 0.06, -0.30],
        [0.21, -0.38, -0.63, 0.97, -0.39, 0.82, 0.31, 1.93, 0.14, 0.88],
        [0.25, -0.25, -0.35, 0.43, 0.19, 0.65, 0.06, 0.14, 1.39, -0.05],
        [-0.03, 0.73, -0.12, 0.22, 0.13, 0.42, -0.30, 0.88, -0.05, 1.76],
    ];
    SymMatrix::from_fn(10, |i, j| rows[i][j])
}

pub fn hjb10_lower_printed() -> SymMatrix {
    let rows: [[f64; 10]; 10] = [
        [0.73, -0.21, -0.09, 0.28, -0.18, -0.07, -0.07, -0.16, 0.20, -0.22],
        [-0.21, 1.63, 0.15, -0.04, -0.07, -0.30, -0.04, -0.40, -0.19, 0.08],
        [-0.09, 0.15, 1.06, -0.80, 0.18, -0.28, -0.64, -0.66, -0.35, -0.06],
        [0.28, -0.04, -0.80, 1.31, -0.07, 0.57, 0.19, 0.60, 0.69, 0.15],
        [-0.18, -0.07, 0.18, -0.07, 0.38, 0.10, -0.23, -0.04, -0.12, 0.01],
        [-0.07, -0.30, -0.28, 0.57, 0.10, 0.54, -0.16, 0.53, 0.18, 0.29],
        [-0.07, -0.04, -0.64, 0.19, -0.23, -0.16, 1.32, 0.04, 0.06, -0.53],
        [-0.16, -0.40, -0.66, 0.60, -0.04, 0.53, 0.04, 0.98, 0.17, 0.61],
        [0.20, -0.19, -0.35, 0.69, -0.12, 0.18, 0.06, 0.17, 0.81, -0.11],
        [-0.22, 0.08, -0.06, 0.15, 0.01, 0.29, -0.53, 0.61, -0.11, 1.09],
    ];
    SymMatrix::from_fn(10, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmat::diag_part;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn matrix_sup_scalar_cases() {
        let one = |v: f64| SymMatrix::from_diag(&[v]);
        let (val, max) = matrix_interval_sup(&one(1.0), &one(2.0), &one(3.0)).unwrap();
        assert_close(val, 6.0, 1e-12);
        assert_close(max.get(0, 0), 2.0, 1e-12);
        let (val, max) = matrix_interval_sup(&one(1.0), &one(2.0), &one(-3.0)).unwrap();
        assert_close(val, -3.0, 1e-12);
        assert_close(max.get(0, 0), 1.0, 1e-12);
    }

    #[test]
    fn matrix_sup_indefinite_direction() {
        let lo = SymMatrix::identity(2);
        let hi = SymMatrix::scaled_identity(2, 2.0);
        let gamma = SymMatrix::from_diag(&[1.0, -1.0]);
        let (val, max) = matrix_interval_sup(&lo, &hi, &gamma).unwrap();
        assert_close(val, 1.0, 1e-12);
        assert_close(max.get(0, 0), 2.0, 1e-12);
        assert_close(max.get(1, 1), 1.0, 1e-12);
    }

    #[test]
    fn matrix_sup_rejects_bad_interval() {
        let lo = SymMatrix::scaled_identity(2, 2.0);
        let hi = SymMatrix::identity(2);
        assert!(matrix_interval_sup(&lo, &hi, &SymMatrix::identity(2)).is_err());
    }

    #[test]
    fn matrix_sup_degenerate_interval_is_linear() {
        let lo = hjb10_lower_printed();
        let gamma = SymMatrix::from_fn(10, |i, j| ((i + 2 * j) as f64 * 0.37).sin());
        let (val, max) = matrix_interval_sup(&lo, &lo, &gamma).unwrap();
        assert_close(val, frobenius(&lo, &gamma).unwrap(), 1e-9);
        for i in 0..10 {
            for j in 0..10 {
                assert_close(max.get(i, j), lo.get(i, j), 1e-9);
            }
        }
    }

    #[test]
    fn matrix_sup_dominates_brute_force() {
        // Random feasible points lo + L M L' with 0 <= M <= I never beat the
        // closed form, and the returned maximizer is feasible and attains it.
        let mut state = 5u64;
        for case in 0..25 {
            let d = 2 + case % 4;
            let lo = random_psd(d, &mut state);
            let gap = random_psd(d, &mut state);
            let hi = lo.add(&gap).unwrap();
            let gamma = SymMatrix::from_fn(d, |_i, _j| 2.0 * lcg(&mut state) - 1.0);
            let (val, max) = matrix_interval_sup(&lo, &hi, &gamma).unwrap();
            let ambient = lo.frobenius_norm() + hi.frobenius_norm();
            let below = sym_eig(&max.sub(&lo).unwrap()).unwrap().min_eigenvalue();
            let above = sym_eig(&hi.sub(&max).unwrap()).unwrap().min_eigenvalue();
            assert!(below >= -1e-9 * ambient && above >= -1e-9 * ambient);
            assert_close(frobenius(&max, &gamma).unwrap(), val, 1e-9);
            let l = cholesky_lower(&gap).unwrap();
            for _ in 0..200 {
                let m = random_contraction(d, &mut state);
                let feasible = lo.add(&l.congruence(&m)).unwrap();
                let v = frobenius(&feasible, &gamma).unwrap();
                assert!(v <= val + 1e-9, "feasible point beats sup: {v} > {val}");
            }
        }
    }

    #[test]
    fn matrix_sup_monotone_in_gamma() {
        let mut state = 77u64;
        for _ in 0..20 {
            let d = 3;
            let lo = random_psd(d, &mut state);
            let hi = lo.add(&random_psd(d, &mut state)).unwrap();
            let gamma = SymMatrix::from_fn(d, |_i, _j| 2.0 * lcg(&mut state) - 1.0);
            let delta = random_psd(d, &mut state);
            let v1 = matrix_interval_sup(&lo, &hi, &gamma).unwrap().0;
            let v2 = matrix_interval_sup(&lo, &hi, &gamma.add(&delta).unwrap()).unwrap().0;
            assert!(v2 >= v1 - 1e-9);
        }
    }

    #[test]
    fn scalar_hjb_true_values() {
        let e = lookup("ex6.1").unwrap();
        let sol = e.problem.true_solution.as_ref().unwrap();
        assert_close(sol(0.0, &e.x0), (18.0f64).sin(), 1e-12);
        assert_close((18.0f64).sin(), -0.750987, 1e-6);
        let e2 = lookup("ex6.2").unwrap();
        let sol2 = e2.problem.true_solution.as_ref().unwrap();
        assert_close(sol2(0.0, &e2.x0), (78.0f64).sin(), 1e-12);
        assert_close((78.0f64).sin(), 0.513978, 1e-6);
    }

    #[test]
    fn scalar_hjb_zero_gamma() {
        let e = lookup("ex6.1").unwrap();
        let zero = SymMatrix::zeros(3);
        let gv = GammaView::new(&zero, SparsityMask::Diagonal);
        // gamma = 0 kills the sup term; driver at y=0, z=0 is zero too.
        assert_close(e.problem.evaluate(0.1, &e.x0, 0.0, &[0.0; 3], &gv), 0.0, 1e-12);
    }

    #[test]
    fn isaacs_piecewise_values() {
        assert_close(isaacs_piecewise(0.0), 0.0, 1e-15);
        assert_close(isaacs_piecewise(2.0), 1.75, 1e-15);
        // Continuity at the junctions, and the common values there.
        assert_close(isaacs_piecewise(1.0), 1.0 - 0.25, 1e-15);
        assert_close(isaacs_piecewise(1.0 + 1e-12), isaacs_piecewise(1.0), 1e-9);
        assert_close(isaacs_piecewise(-1.0), -1.0 + 0.25, 1e-15);
        assert_close(isaacs_piecewise(-1.0 - 1e-12), isaacs_piecewise(-1.0), 1e-9);
    }

    #[test]
    fn isaacs_slope_range() {
        // Difference quotients stay within [1/2, 1]: theta = 0, Lambda = 2.
        let mut prev = isaacs_piecewise(-3.0);
        let mut q = -3.0;
        let dq = 1e-3;
        while q < 3.0 {
            let next = isaacs_piecewise(q + dq);
            let slope = (next - prev) / dq;
            assert!(
                (0.5 - 1e-9..=1.0 + 1e-9).contains(&slope),
                "slope {slope} at q={q}"
            );
            prev = next;
            q += dq;
        }
    }

    #[test]
    fn hjb10_interval_facts() {
        // The printed pair is NOT interval-PSD after two-decimal rounding;
        // the shipped interval repairs the gap to about +0.0024.
        let lo = hjb10_lower_printed();
        let hi_printed = hjb10_upper_printed();
        assert!(!is_psd_interval(&lo, &hi_printed).unwrap());
        let gap_printed = hi_printed.sub(&lo).unwrap();
        let min_printed = sym_eig(&gap_printed).unwrap().min_eigenvalue();
        assert_close(min_printed, -0.00761, 2e-4);

        let (lo, hi) = hjb10_interval();
        assert!(is_psd_interval(&lo, &hi).unwrap());
        let gap = hi.sub(&lo).unwrap();
        let min_eig = sym_eig(&gap).unwrap().min_eigenvalue();
        assert_close(min_eig, 0.0026, 1e-3);
    }

    #[test]
    fn matrix_hjb_benchmark_value() {
        let e = lookup("ex6.6").unwrap();
        let sol = e.problem.true_solution.as_ref().unwrap();
        let v = sol(0.0, &e.x0);
        // The printed starting point is rounded to two decimals; the exact
        // value of the manufactured solution there is 0.759072.
        assert_close(v, 0.759072, 1e-6);
        assert_close(v, 0.75805, 1.1e-3);
    }

    #[test]
    fn tridiagonal_facts() {
        let e = lookup("ex6.8").unwrap();
        assert_eq!(e.problem.mask.count(10), 28); // 3d - 2
        let sol = e.problem.true_solution.as_ref().unwrap();
        assert_close(sol(0.0, &e.x0), (55.0f64).sin(), 1e-12);
        assert_close((55.0f64).sin(), -0.999755, 1e-6);
        // Off-diagonal generator derivative vanishes at gamma_ij = 0.
        let q: f64 = 1e-7;
        let slope = (2.0 / (1.0 + q * q).sqrt() - 2.0) / q;
        assert_close(slope, 0.0, 1e-6);
    }

    #[test]
    fn quasilinear_requires_theta_off_diagonal() {
        let coeffs = FbsdeCoefficients {
            m: 2,
            drift: Arc::new(|_, _, _, _| vec![0.0, 0.0]),
            diffusion: Arc::new(|_, _, _| vec![1.0, 0.5, 0.5, 1.0]),
            driver: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            diagonal: false,
        };
        assert!(make_quasilinear(coeffs.clone(), 2, 1.0, (0.5, 2.0), None, 1.0, 1.0, None).is_err());
        assert!(
            make_quasilinear(coeffs, 2, 1.0, (0.5, 2.0), Some(0.3), 1.0, 1.0, None).is_ok()
        );
    }

    #[test]
    fn quasilinear_reduces_to_heat() {
        // Constant sigma, b = 0, f = 0: G is linear in gamma.
        let coeffs = FbsdeCoefficients {
            m: 2,
            drift: Arc::new(|_, _, _, _| vec![0.0, 0.0]),
            diffusion: Arc::new(|_, _, _| vec![1.0, 0.0, 0.0, 1.0]),
            driver: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            diagonal: true,
        };
        let p = make_quasilinear(coeffs, 2, 1.0, (1.0, 1.0), None, 0.0, 0.0, None).unwrap();
        let g1 = SymMatrix::from_diag(&[1.0, 2.0]);
        let gv = GammaView::new(&g1, SparsityMask::Diagonal);
        assert_close(p.evaluate(0.3, &[0.1, 0.2], 0.5, &[0.3, 0.4], &gv), 1.5, 1e-14);
    }

    #[test]
    fn feynman_kac_extraction() {
        let e = lookup("ex6.4").unwrap();
        // sigma == diag(s): z = s * du componentwise.
        let du = vec![0.25; 12];
        let x: Vec<f64> = (2..=13).map(|i| i as f64).collect();
        let y = 0.7;
        let (yv, z) = feynman_kac_yz(&e.problem, y, &du, 0.0, &x).unwrap();
        assert_close(yv, y, 1e-15);
        let xbar: f64 = x.iter().sum::<f64>() / 12.0;
        let s = 1.0 + (xbar + y).sin() / 3.0;
        for zk in &z {
            assert_close(*zk, s * 0.25, 1e-12);
        }
        // Constant u: du = 0 gives z = 0.
        let (_, z0) = feynman_kac_yz(&e.problem, 1.0, &vec![0.0; 12], 0.0, &x).unwrap();
        assert!(z0.iter().all(|&v| v == 0.0));
        // Non-quasilinear problems are rejected.
        let e1 = lookup("ex6.1").unwrap();
        assert!(feynman_kac_yz(&e1.problem, 0.0, &[0.0; 3], 0.0, &[0.0; 3]).is_err());
    }

    #[test]
    fn fbsde_z_closed_form() {
        // Z_i = cos(t + d xbar) [1 + sin(xbar + sin(t + d xbar))/3].
        let e = lookup("ex6.4").unwrap();
        let x: Vec<f64> = (2..=13).map(|i| i as f64).collect();
        let d = 12.0;
        let sum: f64 = x.iter().sum();
        let t = 0.07;
        let u = (t + sum).sin();
        let du = vec![(t + sum).cos(); 12];
        let (_, z) = feynman_kac_yz(&e.problem, u, &du, t, &x).unwrap();
        let expect = (t + sum).cos() * (1.0 + (sum / d + u).sin() / 3.0);
        for zk in &z {
            assert_close(*zk, expect, 1e-12);
        }
    }

    #[test]
    fn truncation_identity_and_bounds() {
        let e = lookup("ex6.5").unwrap();
        let same = epsilon_truncate(&e.problem, 0.0, &SymMatrix::identity(12)).unwrap();
        assert_eq!(same.bounds, e.problem.bounds);
        let truncated = epsilon_truncate(&e.problem, 0.01, &SymMatrix::identity(12)).unwrap();
        assert_close(truncated.bounds.alpha_lo, 0.5 * 1e-4, 1e-18);
        assert_close(truncated.bounds.alpha_hi, 1.0, 1e-15);
        assert!(truncated.bounds.alpha_lo > 0.0);
        // Values agree wherever the original sup already sat above eps^2.
        let g = SymMatrix::from_diag(&[1.0; 12]);
        let gv = GammaView::new(&g, SparsityMask::Diagonal);
        let x = vec![0.0; 12];
        assert_close(
            truncated.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv),
            e.problem.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv),
            1e-12,
        );
        // On negative trace they differ by (eps^2 / 2) tr gamma.
        let g_neg = SymMatrix::from_diag(&[-1.0; 12]);
        let gv_neg = GammaView::new(&g_neg, SparsityMask::Diagonal);
        let diff = truncated.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv_neg)
            - e.problem.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv_neg);
        assert_close(diff, 0.5 * 1e-4 * -12.0, 1e-12);
    }

    #[test]
    fn truncation_additive_for_general_generators() {
        let e = lookup("ex6.3").unwrap();
        let truncated = epsilon_truncate(&e.problem, 0.05, &SymMatrix::identity(12)).unwrap();
        assert_close(truncated.bounds.alpha_lo, 0.5 + 0.05, 1e-15);
        let g = SymMatrix::from_diag(&[0.5; 12]);
        let gv = GammaView::new(&g, SparsityMask::Diagonal);
        let x = vec![0.0; 12];
        let base = e.problem.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv);
        let lifted = truncated.evaluate(0.0, &x, 0.0, &vec![0.0; 12], &gv);
        assert_close(lifted - base, 0.05 * 6.0, 1e-12);
    }

    #[test]
    fn parabolicity_spot_check() {
        // G is nondecreasing in gamma along mask-compatible PSD directions.
        let mut state = 13u64;
        for key in REGISTRY_KEYS {
            let e = lookup(key).unwrap();
            let d = e.problem.dim;
            for _ in 0..20 {
                let t = 0.2 * lcg(&mut state);
                let x: Vec<f64> = (0..d).map(|_| 4.0 * lcg(&mut state)).collect();
                let y = 2.0 * lcg(&mut state) - 1.0;
                let z: Vec<f64> = (0..d).map(|_| 2.0 * lcg(&mut state) - 1.0).collect();
                let gamma = SymMatrix::from_fn(d, |_i, _j| 2.0 * lcg(&mut state) - 1.0);
                let gamma = SymMatrix::from_fn(d, |i, j| {
                    if e.problem.mask.contains(i, j) { gamma.get(i, j) } else { 0.0 }
                });
                let delta = match e.problem.mask {
                    SparsityMask::Diagonal => {
                        diag_part(&random_psd(d, &mut state))
                    }
                    SparsityMask::Tridiagonal => {
                        // Sums of vv' with v supported on adjacent pairs stay
                        // tridiagonal and PSD.
                        let mut m = SymMatrix::zeros(d);
                        for k in 0..d - 1 {
                            let a = lcg(&mut state);
                            let b = 2.0 * lcg(&mut state) - 1.0;
                            let add = SymMatrix::from_fn(d, |i, j| {
                                let vi = if i == k { a } else if i == k + 1 { b } else { 0.0 };
                                let vj = if j == k { a } else if j == k + 1 { b } else { 0.0 };
                                vi * vj
                            });
                            m = m.add(&add).unwrap();
                        }
                        m
                    }
                    SparsityMask::Full => random_psd(d, &mut state),
                };
                let g1 = GammaView::new(&gamma, e.problem.mask);
                let sum = gamma.add(&delta).unwrap();
                let g2 = GammaView::new(&sum, e.problem.mask);
                let v1 = e.problem.evaluate(t, &x, y, &z, &g1);
                let v2 = e.problem.evaluate(t, &x, y, &z, &g2);
                assert!(v2 >= v1 - 1e-10, "{key}: G decreased along PSD direction");
            }
        }
    }

    #[test]
    fn terminal_bound_spot_check() {
        let mut state = 99u64;
        for key in REGISTRY_KEYS {
            let e = lookup(key).unwrap();
            for _ in 0..50 {
                let x: Vec<f64> =
                    (0..e.problem.dim).map(|_| 20.0 * lcg(&mut state) - 10.0).collect();
                assert!((e.problem.terminal)(&x).abs() <= e.problem.terminal_bound + 1e-12);
            }
        }
    }

    #[test]
    fn registry_rejects_unknown() {
        assert!(lookup("ex9.9").is_err());
    }

    fn random_psd(d: usize, state: &mut u64) -> SymMatrix {
        let g = SymMatrix::from_fn(d, |_i, _j| 2.0 * lcg(state) - 1.0);
        SymMatrix::from_fn(d, |i, j| {
            let mut s = 0.0;
            for k in 0..d {
                s += g.get(i, k) * g.get(j, k);
            }
            s
        })
    }

    fn random_contraction(d: usize, state: &mut u64) -> SymMatrix {
        // 0 <= M <= I via M = Q diag(u) Q' with u in [0, 1].
        let a = random_psd(d, state);
        let eig = sym_eig(&a).unwrap();
        let u: Vec<f64> = (0..d).map(|_| lcg(state)).collect();
        SymMatrix::from_fn(d, |i, j| {
            let mut s = 0.0;
            for k in 0..d {
                s += eig.eigenvectors[i * d + k] * u[k] * eig.eigenvectors[j * d + k];
            }
            s
        })
    }
}
