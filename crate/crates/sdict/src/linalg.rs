//! Hermitian positive-definite solves via complex Cholesky.
//!
//! `solve_hpd` factors G + ridge * trace(G)/K * I once and back-substitutes
//! every right-hand-side column. The ridge is relative to the mean Gram
//! diagonal so one default works across atom amplitudes.

use crate::complex::Complex64;
use crate::error::{Result, SdictError};
use crate::matrix::{CMatrix, HermitianMatrix};

/// Default relative ridge for near-singular dictionaries.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// G = phi^H phi. The diagonal is a sum of squared moduli, hence real; the
/// constructor pins it exactly real to keep later pivots clean.
pub fn gram(phi: &CMatrix) -> HermitianMatrix {
    let g = phi.conj_t_matmul(phi);
    HermitianMatrix::new(g, 1e-9).expect("phi^H phi is hermitian by construction")
}

/// Lower-triangular factor L with A = L L^H.
pub struct CholeskyFactor {
    dim: usize,
    /// Row-major lower triangle, full square storage (upper part zero).
    l: Vec<Complex64>,
}

/// Factor a Hermitian matrix given as a full square. Fails with `Singular`
/// on a non-finite pivot or one below 1e-12 of the mean diagonal: exact
/// rank deficiency (duplicate atoms) reaches the pivot as roundoff-sized
/// residue, which must register as singular rather than squeak through.
pub fn cholesky(a: &CMatrix) -> Result<CholeskyFactor> {
    assert_eq!(a.rows, a.cols, "cholesky needs a square matrix");
    let n = a.rows;
    let mean_diag = (0..n).map(|i| a.at(i, i).re).sum::<f64>() / n as f64;
    let floor = 1e-12 * mean_diag.max(0.0);
    let mut l = vec![Complex64::ZERO; n * n];
    for j in 0..n {
        let mut diag = a.at(j, j).re;
        for k in 0..j {
            diag -= l[j * n + k].norm_sq();
        }
        if !(diag.is_finite() && diag > floor) {
            return Err(SdictError::Singular { col: j, pivot: diag });
        }
        let pivot = diag.sqrt();
        l[j * n + j] = Complex64::new(pivot, 0.0);
        for i in (j + 1)..n {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = acc.scale(1.0 / pivot);
        }
    }
    Ok(CholeskyFactor { dim: n, l })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solve (L L^H) x = b for every column of b, in place.
    pub fn solve_in_place(&self, b: &mut CMatrix) {
        assert_eq!(b.rows, self.dim, "rhs row count mismatch");
        let n = self.dim;
        let cols = b.cols;
        // Forward: L y = b.
        for i in 0..n {
            let lii = 1.0 / self.l[i * n + i].re;
            for c in 0..cols {
                let mut acc = b.at(i, c);
                for k in 0..i {
                    acc -= self.l[i * n + k] * b.at(k, c);
                }
                *b.at_mut(i, c) = acc.scale(lii);
            }
        }
        // Backward: L^H x = y.
        for i in (0..n).rev() {
            let lii = 1.0 / self.l[i * n + i].re;
            for c in 0..cols {
                let mut acc = b.at(i, c);
                for k in (i + 1)..n {
                    acc -= self.l[k * n + i].conj() * b.at(k, c);
                }
                *b.at_mut(i, c) = acc.scale(lii);
            }
        }
    }

    /// Reconstruct L L^H (test support for residual checks).
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.dim;
        let mut out = CMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::ZERO;
                for k in 0..=i.min(j) {
                    acc += self.l[i * n + k] * self.l[j * n + k].conj();
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }
}

/// Apply the relative ridge and factor. Exposed separately from
/// `solve_hpd` so callers can reuse one factorization for several solves.
pub fn factor_ridged(g: &HermitianMatrix, ridge: f64) -> Result<CholeskyFactor> {
    let k = g.dim();
    let shift = ridge * g.trace() / k as f64;
    let mut a = g.as_cmatrix().clone();
    for i in 0..k {
        a.at_mut(i, i).re += shift;
    }
    cholesky(&a)
}

/// Solve (G + ridge * trace(G)/K * I) C = B.
pub fn solve_hpd(g: &HermitianMatrix, b: &CMatrix, ridge: f64) -> Result<CMatrix> {
    if b.rows != g.dim() {
        return Err(SdictError::DimMismatch(format!(
            "rhs has {} rows, gram is {}x{}",
            b.rows,
            g.dim(),
            g.dim()
        )));
    }
    let factor = factor_ridged(g, ridge)?;
    let mut x = b.clone();
    factor.solve_in_place(&mut x);
    Ok(x)
}
