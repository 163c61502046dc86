//! Dense symmetric linear algebra sized for scheme work (d up to a few dozen):
//! Frobenius products, a pivot-tolerant Cholesky factorization and a cyclic
//! Jacobi eigensolver.
//!
//! Everything is plain row-major `Vec<f64>` storage with both triangles kept
//! in sync; the upper triangle is authoritative when a constructor receives
//! asymmetric input.

use crate::error::{Error, Result};

/// Relative tolerance deciding whether a matrix counts as PSD: we accept
/// eigenvalues down to `-PSD_REL_TOL * ||A||_F`.
pub const PSD_REL_TOL: f64 = 1e-10;

/// Dense `d x d` real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        SymMatrix { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = s;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    /// Builds from `f(i, j)` evaluated on the upper triangle (`i <= j`).
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Builds from full rows, taking the upper triangle as authoritative.
    /// Fails if rows are ragged or the asymmetry exceeds `1e-12 * max|entry|`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("rows must form a square matrix".into()));
        }
        let scale = rows
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (rows[i][j] - rows[j][i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "asymmetric input at ({i},{j}): {} vs {}",
                        rows[i][j], rows[j][i]
                    )));
                }
            }
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Writes both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_same_dim(self, other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_same_dim(self, other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    /// `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Symmetric product `B A B'` for a general square `b` given row-major.
    pub fn conjugate_by(&self, b: &[f64]) -> SymMatrix {
        let d = self.dim;
        assert_eq!(b.len(), d * d);
        // tmp = B A  (general d x d)
        let mut tmp = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let bik = b[i * d + k];
                if bik == 0.0 {
                    continue;
                }
                for j in 0..d {
                    tmp[i * d + j] += bik * self.data[k * d + j];
                }
            }
        }
        let mut out = SymMatrix::zeros(d);
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += tmp[i * d + k] * b[j * d + k];
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// True when all off-diagonal entries are exactly zero.
    pub fn is_diagonal(&self) -> bool {
        for i in 0..self.dim {
            for j in 0..self.dim {
                if i != j && self.data[i * self.dim + j] != 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Lower triangular factor; entries above the diagonal are zero.
#[derive(Debug, Clone)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// `L L'` as a symmetric matrix.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.dim;
        SymMatrix::from_fn(d, |i, j| {
            let mut s = 0.0;
            for k in 0..=i.min(j) {
                s += self.get(i, k) * self.get(j, k);
            }
            s
        })
    }

    /// `L' A L` for symmetric `A`.
    pub fn congruence_tr(&self, a: &SymMatrix) -> SymMatrix {
        let d = self.dim;
        // B = L' (row-major), then B A B'
        let mut bt = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                bt[i * d + j] = self.get(j, i);
            }
        }
        a.conjugate_by(&bt)
    }

    /// `L A L'` for symmetric `A`.
    pub fn congruence(&self, a: &SymMatrix) -> SymMatrix {
        a.conjugate_by(&self.data)
    }

    /// Solves `L y = b` in place. Zero pivots (from the PSD pivot-zeroing
    /// rule) map to zero solution entries.
    pub fn solve_forward(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = b[i];
            for k in 0..i {
                s -= self.get(i, k) * b[k];
            }
            let piv = self.get(i, i);
            b[i] = if piv != 0.0 { s / piv } else { 0.0 };
        }
    }

    /// Solves `L' x = b` in place, with the same zero-pivot convention.
    pub fn solve_backward(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = b[i];
            for k in (i + 1)..d {
                s -= self.get(k, i) * b[k];
            }
            let piv = self.get(i, i);
            b[i] = if piv != 0.0 { s / piv } else { 0.0 };
        }
    }
}

/// Full spectral decomposition with eigenvalues in descending order and
/// eigenvectors as columns of an orthogonal matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Row-major `d x d`; column `j` is the eigenvector for `eigenvalues[j]`.
    pub eigenvectors: Vec<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.eigenvectors[i * d + j]).collect()
    }

    /// `P diag(lambda) P'`.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.dim();
        SymMatrix::from_fn(d, |i, j| {
            let mut s = 0.0;
            for k in 0..d {
                s += self.eigenvectors[i * d + k] * self.eigenvalues[k] * self.eigenvectors[j * d + k];
            }
            s
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }
}

fn check_same_dim(a: &SymMatrix, b: &SymMatrix) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.dim, b.dim)));
    }
    Ok(())
}

/// Frobenius product `a : b = tr(a b)`.
pub fn frobenius(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    check_same_dim(a, b)?;
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum())
}

/// The diagonal matrix `D[a]` carrying the diagonal of `a`.
pub fn diag_part(a: &SymMatrix) -> SymMatrix {
    SymMatrix::from_diag(&a.diag())
}

/// Cholesky factorization of a PSD matrix with pivot zeroing: a pivot below
/// `1e-12 * max_diagonal` is set to zero along with its column, which handles
/// singular-but-PSD input. Indefinite input (an eigenvalue below
/// `-1e-10 * ||a||_F`) is rejected.
pub fn cholesky_lower(a: &SymMatrix) -> Result<LowerTriangular> {
    let d = a.dim;
    let norm = a.frobenius_norm();
    let max_diag = a.diag().iter().fold(0.0f64, |m, &v| m.max(v));
    let pivot_tol = 1e-12 * max_diag.max(0.0);
    let neg_tol = -PSD_REL_TOL * norm;

    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l[j * d + k] * l[j * d + k];
        }
        if pivot <= pivot_tol {
            if pivot < neg_tol {
                // The running pivot is decisively negative; let the
                // eigensolver issue the verdict so the error reports a
                // genuine eigenvalue, not a factorization artifact.
                let eig = sym_eig(a)?;
                let min_eig = eig.min_eigenvalue();
                if min_eig < neg_tol {
                    return Err(Error::NotPositiveSemidefinite { min_eig });
                }
            }
            // Singular direction: the pivot and the entries below it stay
            // zero; previously computed columns are untouched.
            continue;
        }
        let piv = pivot.sqrt();
        l[j * d + j] = piv;
        for i in (j + 1)..d {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / piv;
        }
    }
    Ok(LowerTriangular { dim: d, data: l })
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &SymMatrix) -> Result<SymMatrix> {
    let l = cholesky_lower(a)?;
    let d = a.dim;
    if (0..d).any(|i| l.get(i, i) == 0.0) {
        return Err(Error::NotPositiveSemidefinite { min_eig: 0.0 });
    }
    let mut inv = SymMatrix::zeros(d);
    let mut col = vec![0.0; d];
    for j in 0..d {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        l.solve_forward(&mut col);
        l.solve_backward(&mut col);
        for i in 0..d {
            inv.data[i * d + j] = col[i];
        }
    }
    // Symmetrize away the last rounding bits.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (inv.data[i * d + j] + inv.data[j * d + i]);
            inv.set(i, j, v);
        }
    }
    Ok(inv)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver. Rotations sweep the strict upper triangle until
/// the off-diagonal Frobenius norm falls below `1e-12 * ||a||_F`, then the
/// spectrum is sorted descending with its eigenvector columns.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenDecomposition> {
    let d = a.dim;
    let norm = a.frobenius_norm();
    let mut m = a.data.clone();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                s += 2.0 * m[i * d + j] * m[i * d + j];
            }
        }
        s.sqrt()
    };
    let tol = 1e-12 * norm;
    let mut converged = norm == 0.0 || d == 1 || off(&m) <= tol;
    if !converged {
        for _sweep in 0..JACOBI_MAX_SWEEPS {
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = m[p * d + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m[p * d + p];
                    let aqq = m[q * d + q];
                    // Skip rotations that cannot move anything at f64 scale.
                    if apq.abs() <= f64::EPSILON * 0.5 * (app.abs() + aqq.abs()) && apq.abs() < tol {
                        m[p * d + q] = 0.0;
                        m[q * d + p] = 0.0;
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let mkp = m[k * d + p];
                        let mkq = m[k * d + q];
                        m[k * d + p] = c * mkp - s * mkq;
                        m[k * d + q] = s * mkp + c * mkq;
                    }
                    for k in 0..d {
                        let mpk = m[p * d + k];
                        let mqk = m[q * d + k];
                        m[p * d + k] = c * mpk - s * mqk;
                        m[q * d + k] = s * mpk + c * mqk;
                    }
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
            if off(&m) <= tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].partial_cmp(&m[i * d + i]).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| m[k * d + k]).collect();
    let mut eigenvectors = vec![0.0; d * d];
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..d {
            eigenvectors[i * d + new_j] = v[i * d + old_j];
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// True iff `lo` is PSD and `hi - lo` is PSD, both within the relative
/// tolerance `-1e-10 * ||.||_F`.
pub fn is_psd_interval(lo: &SymMatrix, hi: &SymMatrix) -> Result<bool> {
    check_same_dim(lo, hi)?;
    let gap = hi.sub(lo)?;
    Ok(is_psd(lo)? && is_psd(&gap)?)
}

fn is_psd(a: &SymMatrix) -> Result<bool> {
    let eig = sym_eig(a)?;
    Ok(eig.min_eigenvalue() >= -PSD_REL_TOL * a.frobenius_norm())
}
