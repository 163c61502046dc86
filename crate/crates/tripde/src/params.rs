//! Selection and validation of the scheme parameters `(p, sigma0)`.
//!
//! The trinomial weight `p` and the matrix `sigma0` must keep the one-step
//! operator monotone. Feasibility is governed by the threshold function
//!
//! ```text
//! lambda(p, theta) = 1 + (2p - theta - p(d-3)theta) / (2 p^2 (1+theta)(d-1))
//! ```
//!
//! and the ratio `Lambda = alpha_hi / alpha_lo` of the diagonal-derivative
//! bounds of the conjugated generator: monotonicity needs
//! `Lambda < lambda(p, theta)` together with the normalization
//! `alpha_hi = Lambda / (2p(Lambda-1) + alpha_p)` obtained by rescaling
//! `sigma0`.

use crate::error::{Error, Result};
use crate::symmat::{cholesky_lower, SymMatrix};

/// Declared bounds on the conjugated generator derivative: diagonal entries
/// lie in `[alpha_lo, alpha_hi]` and the diagonal dominates the full matrix
/// up to the defect `theta` (`D[G~] <= (1+theta) G~`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorBounds {
    pub theta: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub dim: usize,
}

impl GeneratorBounds {
    /// `alpha_lo` may be zero for degenerate generators; such bounds are
    /// accepted here and rejected later by [`build_params`].
    pub fn new(theta: f64, alpha_lo: f64, alpha_hi: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(theta >= 0.0) {
            return Err(Error::InvalidArgument(format!("theta must be >= 0, got {theta}")));
        }
        if !(alpha_lo >= 0.0) || !(alpha_hi >= alpha_lo) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= alpha_lo <= alpha_hi, got [{alpha_lo}, {alpha_hi}]"
            )));
        }
        Ok(GeneratorBounds { theta, alpha_lo, alpha_hi, dim })
    }

    /// `Lambda = alpha_hi / alpha_lo`; infinite when `alpha_lo == 0`.
    pub fn lambda_ratio(&self) -> f64 {
        if self.alpha_lo == 0.0 {
            f64::INFINITY
        } else {
            self.alpha_hi / self.alpha_lo
        }
    }
}

/// Non-fatal conditions raised while building parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamWarning {
    /// `theta >= 2/d`: no admissible `p` exists; `p = 1/3` is used anyway.
    MonotonicityInfeasible { theta: f64, dim: usize },
    /// `Lambda >= Lambda_theta`: the ratio exceeds the feasibility cap.
    RatioTooLarge { lambda: f64, lambda_cap: f64 },
    /// `Lambda == lambda(p, theta)` exactly; monotonicity holds only in the
    /// weak (boundary) sense.
    NonStrict { lambda: f64 },
}

/// The full parameter set after rescaling, with the bookkeeping needed by
/// the runtime monotone-coefficient check.
#[derive(Debug, Clone)]
pub struct MonotonicityParams {
    pub p: f64,
    pub sigma0: SymMatrix,
    /// `Lambda = alpha_hi / alpha_lo`.
    pub lambda: f64,
    pub alpha_p: f64,
    pub lambda_at_p: f64,
    /// Whether `Lambda < lambda(p, theta)` holds strictly.
    pub strict: bool,
    pub theta: f64,
    /// Diagonal-derivative bounds in the rescaled `sigma0` conjugation.
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub dim: usize,
    pub warnings: Vec<ParamWarning>,
}

impl MonotonicityParams {
    /// Direct construction from user-chosen `(p, sigma0)`, bypassing the
    /// automatic rescaling. The declared bounds are re-expressed in the
    /// supplied conjugation by the caller.
    pub fn with_override(
        p: f64,
        sigma0: SymMatrix,
        bounds: &GeneratorBounds,
    ) -> Result<MonotonicityParams> {
        if !(p > 0.0 && p <= 1.0 / 3.0) {
            return Err(Error::InvalidArgument(format!("p must lie in (0, 1/3], got {p}")));
        }
        if sigma0.dim() != bounds.dim {
            return Err(Error::DimensionMismatch(format!(
                "sigma0 is {}x{0} but bounds declare d={1}",
                sigma0.dim(),
                bounds.dim
            )));
        }
        cholesky_lower(&sigma0)?;
        let theta = bounds.theta;
        let lambda = bounds.lambda_ratio();
        let lambda_at_p = lambda_of(p, theta, bounds.dim)?;
        let mut warnings = Vec::new();
        if theta >= 2.0 / bounds.dim as f64 {
            warnings.push(ParamWarning::MonotonicityInfeasible { theta, dim: bounds.dim });
        }
        if lambda >= lambda_at_p {
            warnings.push(ParamWarning::RatioTooLarge { lambda, lambda_cap: lambda_at_p });
        }
        Ok(MonotonicityParams {
            p,
            sigma0,
            lambda,
            alpha_p: alpha_p_of(p, theta),
            lambda_at_p,
            strict: lambda < lambda_at_p,
            theta,
            alpha_lo: bounds.alpha_lo,
            alpha_hi: bounds.alpha_hi,
            dim: bounds.dim,
            warnings,
        })
    }
}

/// `alpha_p = (p(2+3 theta) - theta) / (p (1+theta))`.
pub fn alpha_p_of(p: f64, theta: f64) -> f64 {
    (p * (2.0 + 3.0 * theta) - theta) / (p * (1.0 + theta))
}

/// The monotonicity threshold `lambda(p, theta)`. For `d == 1` the scheme
/// has no off-diagonal coupling and the threshold is unbounded.
pub fn lambda_of(p: f64, theta: f64, dim: usize) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("p must be positive, got {p}")));
    }
    if dim == 1 {
        return Ok(f64::INFINITY);
    }
    let d = dim as f64;
    let numer = 2.0 * p - theta - p * (d - 3.0) * theta;
    let denom = 2.0 * p * p * (1.0 + theta) * (d - 1.0);
    Ok(1.0 + numer / denom)
}

/// Outcome of [`select_p`]: the chosen weight plus a feasibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedP {
    pub p: f64,
    /// False when `theta >= 2/d`, where no `p` satisfies the constraints and
    /// `1/3` is returned as a fallback.
    pub feasible: bool,
}

/// Picks the trinomial weight `p`.
///
/// For `theta == 0` this is `min{ 1/((Lambda-1)(d-1)), 1/3 }` (with `1/3`
/// when `Lambda == 1` or `d == 1`). For `theta > 0` it maximizes
/// `lambda(., theta)` over the admissible interval
/// `[theta/(2(1+theta)), 1/3]`: the unconstrained maximizer is
/// `2 theta / (2 - (d-3) theta)`, clamped to the interval. For
/// `theta >= 2/d` no choice works and `1/3` is returned with
/// `feasible = false`.
pub fn select_p(theta: f64, lambda: f64, dim: usize) -> Result<SelectedP> {
    if !(theta >= 0.0) || !(lambda >= 1.0) || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "need theta >= 0, Lambda >= 1, d >= 1; got theta={theta}, Lambda={lambda}, d={dim}"
        )));
    }
    let d = dim as f64;
    if theta >= 2.0 / d {
        return Ok(SelectedP { p: 1.0 / 3.0, feasible: false });
    }
    let p = if theta == 0.0 {
        if lambda <= 1.0 || dim == 1 {
            1.0 / 3.0
        } else {
            (1.0 / ((lambda - 1.0) * (d - 1.0))).min(1.0 / 3.0)
        }
    } else {
        let denom = 2.0 - (d - 3.0) * theta;
        if denom > 0.0 {
            2.0 * theta / denom
        } else {
            // (d-3) theta >= 2: the threshold is maximized at the right
            // endpoint of the admissible interval.
            1.0 / 3.0
        }
    };
    let lo = theta / (2.0 * (1.0 + theta));
    Ok(SelectedP { p: p.clamp(lo, 1.0 / 3.0), feasible: true })
}

/// The feasibility cap `Lambda_theta = sup_p lambda(p, theta)`, evaluated at
/// the optimal `p` from [`select_p`].
pub fn lambda_cap(theta: f64, dim: usize) -> Result<f64> {
    if dim == 1 || theta == 0.0 {
        return Ok(f64::INFINITY);
    }
    let p = select_p(theta, 1.0, dim)?.p;
    lambda_of(p, theta, dim)
}

/// Builds the full parameter set from generator bounds: chooses `p`, then
/// rescales `base_sigma0` by the scalar that normalizes the upper diagonal
/// bound to `Lambda / (2p(Lambda-1) + alpha_p)`.
///
/// The bounds are understood relative to the conjugation by `base_sigma0`;
/// since the conjugated generator scales as `s^-2` under `sigma0 -> s sigma0`,
/// the required factor is `s = sqrt(alpha_hi / alpha_target)`.
pub fn build_params(bounds: &GeneratorBounds, base_sigma0: &SymMatrix) -> Result<MonotonicityParams> {
    if base_sigma0.dim() != bounds.dim {
        return Err(Error::DimensionMismatch(format!(
            "sigma0 is {}x{0} but bounds declare d={1}",
            base_sigma0.dim(),
            bounds.dim
        )));
    }
    if bounds.alpha_lo <= 0.0 {
        return Err(Error::DegenerateBounds(
            "alpha_lo == 0: rescaling is undefined for a degenerate generator; \
             truncate the problem (eps > 0) or supply explicit (p, sigma0) overrides"
                .into(),
        ));
    }
    cholesky_lower(base_sigma0)?;

    let theta = bounds.theta;
    let lambda = bounds.lambda_ratio();
    let mut warnings = Vec::new();

    let sel = select_p(theta, lambda, bounds.dim)?;
    if !sel.feasible {
        warnings.push(ParamWarning::MonotonicityInfeasible { theta, dim: bounds.dim });
    }
    let p = sel.p;
    let a_p = alpha_p_of(p, theta);
    let lambda_at_p = lambda_of(p, theta, bounds.dim)?;
    let cap = lambda_cap(theta, bounds.dim)?;
    if lambda > lambda_at_p {
        warnings.push(ParamWarning::RatioTooLarge { lambda, lambda_cap: cap });
    }

    let alpha_hi_target = lambda / (2.0 * p * (lambda - 1.0) + a_p);
    let s = (bounds.alpha_hi / alpha_hi_target).sqrt();
    let sigma0 = base_sigma0.scale(s);
    let alpha_hi = bounds.alpha_hi / (s * s);
    let alpha_lo = bounds.alpha_lo / (s * s);

    let strict = lambda < lambda_at_p;
    if !strict {
        warnings.push(ParamWarning::NonStrict { lambda });
    }
    Ok(MonotonicityParams {
        p,
        sigma0,
        lambda,
        alpha_p: a_p,
        lambda_at_p,
        strict,
        theta,
        alpha_lo,
        alpha_hi,
        dim: bounds.dim,
        warnings,
    })
}

/// Runtime check that every step weight stays nonnegative for the concrete
/// step size `h`: over all `3^d` increment outcomes, evaluates
///
/// ```text
/// 1 - C sqrt(h) + I(xi) / (1 - p),
/// I(xi) = p d - p sum_i [ xi_i^2 + 2 a_i - alpha_p a_i xi_i^2 ]
/// ```
///
/// with `a_i` the supplied generator diagonal and `C` the declared Lipschitz
/// aggregate, and returns true iff all weights are `>= 0`.
pub fn check_monotone_coefficient(
    params: &MonotonicityParams,
    gen_diag: &[f64],
    h: f64,
    lipschitz_bound: f64,
) -> Result<bool> {
    if gen_diag.len() != params.dim {
        return Err(Error::DimensionMismatch(format!(
            "gen_diag has {} entries for d={}",
            gen_diag.len(),
            params.dim
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let d = params.dim;
    if d > 16 {
        return Err(Error::BudgetExceeded(format!("3^{d} outcomes is too many to enumerate")));
    }
    let p = params.p;
    let a_p = params.alpha_p;
    // Per-component contribution for xi_i^2 = 0 and xi_i^2 = 1/p.
    let term_zero: Vec<f64> = gen_diag.iter().map(|a| 2.0 * a).collect();
    let term_jump: Vec<f64> =
        gen_diag.iter().map(|a| 1.0 / p + 2.0 * a - (a_p / p) * a).collect();
    let base = 1.0 - lipschitz_bound * h.sqrt();
    let mut pattern = vec![false; d];
    loop {
        let sum: f64 =
            (0..d).map(|i| if pattern[i] { term_jump[i] } else { term_zero[i] }).sum();
        let i_val = p * d as f64 - p * sum;
        if base + i_val / (1.0 - p) < 0.0 {
            return Ok(false);
        }
        // Advance the binary pattern; ternary outcomes collapse to whether
        // each component jumped, so 2^d cases cover all 3^d weights.
        let mut k = 0;
        while k < d && pattern[k] {
            pattern[k] = false;
            k += 1;
        }
        if k == d {
            break;
        }
        pattern[k] = true;
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn lambda_examples() {
        assert_close(lambda_of(1.0 / 3.0, 0.0, 4).unwrap(), 2.0, 1e-14);
        assert_close(lambda_of(1.0 / 11.0, 0.0, 12).unwrap(), 2.0, 1e-12);
        // theta = 2/d zeroes the numerator at p = 1/3.
        for d in [3usize, 5, 8, 12] {
            let theta = 2.0 / d as f64;
            assert_close(lambda_of(1.0 / 3.0, theta, d).unwrap(), 1.0, 1e-12);
        }
        assert!(lambda_of(0.2, 0.0, 1).unwrap().is_infinite());
        assert!(lambda_of(0.0, 0.0, 3).is_err());
    }

    #[test]
    fn lambda_closed_form_theta_zero() {
        for d in 2..12usize {
            for k in 1..20 {
                let p = k as f64 / 60.0;
                let expect = 1.0 + 1.0 / (p * (d as f64 - 1.0));
                assert_close(lambda_of(p, 0.0, d).unwrap(), expect, 1e-12 * expect);
            }
        }
    }

    #[test]
    fn select_p_examples() {
        assert_close(select_p(0.0, 2.0, 3).unwrap().p, 1.0 / 3.0, 1e-15);
        assert_close(select_p(0.0, 2.0, 12).unwrap().p, 1.0 / 11.0, 1e-15);
        assert_close(select_p(0.0, 1.0, 7).unwrap().p, 1.0 / 3.0, 1e-15);
        assert_close(select_p(0.0, 5.0, 1).unwrap().p, 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn select_p_positive_theta_maximizes_lambda() {
        // Sweep the admissible interval on a fine grid; the chosen p must be
        // at least as good as every grid point.
        for (theta, d) in [(0.1, 4usize), (0.05, 8), (0.15, 5), (0.02, 12), (0.3, 3)] {
            let sel = select_p(theta, 1.5, d).unwrap();
            assert!(sel.feasible);
            let best = lambda_of(sel.p, theta, d).unwrap();
            let lo = theta / (2.0 * (1.0 + theta));
            let hi = 1.0 / 3.0;
            for k in 0..=1000 {
                let p = lo + (hi - lo) * k as f64 / 1000.0;
                if p <= 0.0 {
                    continue;
                }
                let val = lambda_of(p, theta, d).unwrap();
                assert!(
                    best >= val - 1e-12,
                    "p*={} lambda*={} beaten by p={} lambda={} (theta={theta}, d={d})",
                    sel.p,
                    best,
                    p,
                    val
                );
            }
            // Clamp respected.
            assert!(sel.p >= lo - 1e-15 && sel.p <= hi + 1e-15);
        }
    }

    #[test]
    fn lambda_cap_matches_closed_form() {
        // Unclamped regime: Lambda_theta = 1 + (2-(d-3)theta)^2 / (8 theta (1+theta)(d-1)).
        for (theta, d) in [(0.1, 4usize), (0.05, 8), (0.02, 12)] {
            let dd = d as f64;
            let denom = 2.0 - (dd - 3.0) * theta;
            let p_star = 2.0 * theta / denom;
            if p_star <= 1.0 / 3.0 {
                let expect = 1.0 + denom * denom / (8.0 * theta * (1.0 + theta) * (dd - 1.0));
                assert_close(lambda_cap(theta, d).unwrap(), expect, 1e-10 * expect);
            }
        }
    }

    #[test]
    fn select_p_infeasible_theta() {
        let sel = select_p(0.5, 2.0, 10).unwrap();
        assert!(!sel.feasible);
        assert_close(sel.p, 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn build_params_scalar_interval_example() {
        // sigma^2 in [1, 2], d = 3: p = 1/3, alpha_lo = 3/8, sigma0 = 2/sqrt(3) I.
        let bounds = GeneratorBounds::new(0.0, 0.5, 1.0, 3).unwrap();
        let params = build_params(&bounds, &SymMatrix::identity(3)).unwrap();
        assert_close(params.p, 1.0 / 3.0, 1e-15);
        assert_close(params.alpha_lo, 3.0 / 8.0, 1e-12);
        assert_close(params.sigma0.get(0, 0), 2.0 / 3.0f64.sqrt(), 1e-12);
        assert!(params.strict);
        assert!(params.warnings.is_empty());
    }

    #[test]
    fn build_params_semilinear_case() {
        // Lambda == 1: normalization pins the diagonal to 1/2.
        let bounds = GeneratorBounds::new(0.0, 3.0, 3.0, 5).unwrap();
        let params = build_params(&bounds, &SymMatrix::identity(5)).unwrap();
        assert_close(params.p, 1.0 / 3.0, 1e-15);
        assert_close(params.alpha_lo, 0.5, 1e-12);
        assert_close(params.alpha_hi, 0.5, 1e-12);
    }

    #[test]
    fn build_params_d12_nonstrict() {
        let bounds = GeneratorBounds::new(0.0, 0.5, 1.0, 12).unwrap();
        let params = build_params(&bounds, &SymMatrix::identity(12)).unwrap();
        assert_close(params.p, 1.0 / 11.0, 1e-14);
        assert_close(params.lambda_at_p, 2.0, 1e-12);
        assert!(!params.strict);
        assert!(params.warnings.contains(&ParamWarning::NonStrict { lambda: 2.0 }));
        assert_close(params.alpha_lo, 11.0 / 24.0, 1e-12);
        assert_close(params.alpha_hi, 11.0 / 12.0, 1e-12);
    }

    #[test]
    fn params_invariants_hold() {
        for (theta, alo, ahi, d) in
            [(0.0, 0.5, 1.0, 3usize), (0.0, 0.5, 1.0, 12), (0.1, 0.3, 0.42, 4), (0.05, 1.0, 2.5, 8)]
        {
            let bounds = GeneratorBounds::new(theta, alo, ahi, d).unwrap();
            let params = build_params(&bounds, &SymMatrix::identity(d)).unwrap();
            let p = params.p;
            // p inside the admissible interval.
            assert!(p >= theta / (2.0 * (1.0 + theta)) - 1e-15 && p <= 1.0 / 3.0 + 1e-15);
            // alpha_p formula and its lower bound.
            assert_close(params.alpha_p, alpha_p_of(p, theta), 1e-14);
            assert!(params.alpha_p >= 2.0 * p - 1e-12);
            // Normalization identity after rescaling.
            let lam = params.lambda;
            assert_close(
                params.alpha_hi,
                lam / (2.0 * p * (lam - 1.0) + params.alpha_p),
                1e-10 * params.alpha_hi,
            );
            // 2 alpha_hi == 1/p + (2 - alpha_p/p) alpha_lo.
            assert_close(
                2.0 * params.alpha_hi,
                1.0 / p + (2.0 - params.alpha_p / p) * params.alpha_lo,
                1e-10 * params.alpha_hi,
            );
        }
    }

    #[test]
    fn lambda_ratio_invariant_under_base_scaling() {
        let bounds = GeneratorBounds::new(0.0, 0.5, 1.0, 4).unwrap();
        let p1 = build_params(&bounds, &SymMatrix::identity(4)).unwrap();
        for s in [0.1, 0.5, 2.0, 7.3] {
            // Pre-scaling the base multiplies the conjugated bounds by s^-2.
            let scaled =
                GeneratorBounds::new(0.0, 0.5 / (s * s), 1.0 / (s * s), 4).unwrap();
            let p2 = build_params(&scaled, &SymMatrix::scaled_identity(4, s)).unwrap();
            assert_close(p2.lambda, p1.lambda, 1e-12 * p1.lambda);
            // Same final sigma0 either way.
            assert_close(p2.sigma0.get(0, 0), p1.sigma0.get(0, 0), 1e-12);
        }
    }

    #[test]
    fn build_params_rejects_degenerate() {
        let bounds = GeneratorBounds::new(0.0, 0.0, 1.0, 3).unwrap();
        assert!(matches!(
            build_params(&bounds, &SymMatrix::identity(3)),
            Err(Error::DegenerateBounds(_))
        ));
    }

    #[test]
    fn monotone_check_semilinear() {
        // All diagonals at 1/2 after scaling: I == 0, so only 1 - C sqrt(h) matters.
        let bounds = GeneratorBounds::new(0.0, 3.0, 3.0, 4).unwrap();
        let params = build_params(&bounds, &SymMatrix::identity(4)).unwrap();
        let diag = vec![0.5; 4];
        assert!(check_monotone_coefficient(&params, &diag, 1e-3, 1.0).unwrap());
        assert!(!check_monotone_coefficient(&params, &diag, 1.0, 2.0).unwrap());
    }

    #[test]
    fn monotone_check_interval_example() {
        let bounds = GeneratorBounds::new(0.0, 0.5, 1.0, 3).unwrap();
        let params = build_params(&bounds, &SymMatrix::identity(3)).unwrap();
        let h = 0.5 / 160.0;
        for diag in [vec![params.alpha_lo; 3], vec![params.alpha_hi; 3]] {
            assert!(check_monotone_coefficient(&params, &diag, h, 2.0).unwrap());
        }
    }

    #[test]
    fn monotone_check_fails_for_forced_ratio() {
        // Lambda = 10 forced at p = 1/3, d = 12 violates lambda(1/3, 0) = 1 + 3/11.
        let bounds = GeneratorBounds::new(0.0, 0.1, 1.0, 12).unwrap();
        let params =
            MonotonicityParams::with_override(1.0 / 3.0, SymMatrix::identity(12), &bounds).unwrap();
        let diag = vec![1.0; 12];
        assert!(!check_monotone_coefficient(&params, &diag, 1e-4, 0.0).unwrap());
    }
}
