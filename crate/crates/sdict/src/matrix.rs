//! Dense row-major matrices, real and complex.
//!
//! These are deliberately plain: `data[r * cols + c]`, no views, no strides.
//! Every consumer in this crate works on whole matrices of modest size.

use crate::complex::Complex64;
use crate::error::{Result, SdictError};

#[derive(Clone, Debug, PartialEq)]
pub struct RMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self * rhs. Accumulates along k in the middle loop so the inner
    /// loop streams both operand rows (cache-friendly for row-major data).
    pub fn matmul(&self, rhs: &RMatrix) -> RMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul dims");
        let mut out = RMatrix::zeros(self.rows, rhs.cols);
        matmul_acc(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        out
    }
}

/// out += a * b where a is m x k, b is k x n, all row-major.
#[inline]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a^T * b where a is k x m, b is k x n (both row-major).
#[inline]
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a * b^T where a is m x k, b is n x k (both row-major).
#[inline]
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::ZERO; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn conj_transpose(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c).conj();
            }
        }
        out
    }

    /// self * rhs.
    pub fn matmul(&self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul dims");
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * rhs.cols..(kk + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// self^H * rhs without materializing the transpose.
    pub fn conj_t_matmul(&self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.rows, rhs.rows, "conj_t_matmul dims");
        let mut out = CMatrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = rhs.row(r);
            for (k, &av) in arow.iter().enumerate() {
                let avc = av.conj();
                let orow = &mut out.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += avc * bv;
                }
            }
        }
        out
    }

    /// self^H * real rhs.
    pub fn conj_t_matmul_real(&self, rhs: &RMatrix) -> CMatrix {
        assert_eq!(self.rows, rhs.rows, "conj_t_matmul_real dims");
        let mut out = CMatrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = rhs.row(r);
            for (k, &av) in arow.iter().enumerate() {
                let avc = av.conj();
                let orow = &mut out.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    o.re += avc.re * bv;
                    o.im += avc.im * bv;
                }
            }
        }
        out
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sq()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.is_finite())
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(0.0, f64::max)
    }
}

/// Square complex matrix checked to be Hermitian on construction.
#[derive(Clone, Debug)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    /// Accepts a square matrix whose conjugate-transpose asymmetry is at
    /// most `tol`, then symmetrizes it exactly and pins the diagonal real.
    pub fn new(m: CMatrix, tol: f64) -> Result<Self> {
        if m.rows != m.cols {
            return Err(SdictError::DimMismatch(format!(
                "hermitian matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let mut sym = m.clone();
        for r in 0..m.rows {
            let d = m.at(r, r);
            if d.im.abs() > tol {
                return Err(SdictError::DimMismatch(format!(
                    "diagonal entry {r} has imaginary part {}",
                    d.im
                )));
            }
            *sym.at_mut(r, r) = Complex64::new(d.re, 0.0);
            for c in (r + 1)..m.cols {
                let a = m.at(r, c);
                let b = m.at(c, r);
                if (a - b.conj()).abs() > tol {
                    return Err(SdictError::DimMismatch(format!(
                        "entries ({r},{c}) and ({c},{r}) are not conjugate"
                    )));
                }
                let avg = (a + b.conj()).scale(0.5);
                *sym.at_mut(r, c) = avg;
                *sym.at_mut(c, r) = avg.conj();
            }
        }
        Ok(Self(sym))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_cmatrix(&self) -> &CMatrix {
        &self.0
    }

    /// Real trace (the diagonal is pinned real by construction).
    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0.at(i, i).re).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_matmul_small() {
        let a = RMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = RMatrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_variants_agree_with_naive() {
        let a = RMatrix::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let b = RMatrix::from_rows(&[&[2.0, 1.0], &[-1.0, 0.0], &[4.0, 2.0]]);
        // a^T has shape 3x2; (a^T)^T * b reproduces a * b.
        let mut via_atb = vec![0.0; 2 * 2];
        let at = {
            let mut t = RMatrix::zeros(3, 2);
            for r in 0..2 {
                for c in 0..3 {
                    *t.at_mut(c, r) = a.at(r, c);
                }
            }
            t
        };
        matmul_at_b_acc(&at.data, &b.data, &mut via_atb, 3, 2, 2);
        assert_eq!(via_atb, a.matmul(&b).data);

        let bt = {
            let mut t = RMatrix::zeros(2, 3);
            for r in 0..3 {
                for c in 0..2 {
                    *t.at_mut(c, r) = b.at(r, c);
                }
            }
            t
        };
        let mut via_abt = vec![0.0; 2 * 2];
        matmul_a_bt_acc(&a.data, &bt.data, &mut via_abt, 2, 3, 2);
        assert_eq!(via_abt, a.matmul(&b).data);
    }

    #[test]
    fn complex_conj_t_matmul_matches_explicit() {
        let mut a = CMatrix::zeros(3, 2);
        let mut x = CMatrix::zeros(3, 2);
        for (i, z) in a.data.iter_mut().enumerate() {
            *z = Complex64::new(i as f64, -(i as f64) * 0.5);
        }
        for (i, z) in x.data.iter_mut().enumerate() {
            *z = Complex64::new(1.0 - i as f64, 0.25 * i as f64);
        }
        let fast = a.conj_t_matmul(&x);
        let slow = a.conj_transpose().matmul(&x);
        assert!(fast.max_abs_diff(&slow) < 1e-14);
    }

    #[test]
    fn hermitian_rejects_asymmetry() {
        let mut m = CMatrix::zeros(2, 2);
        *m.at_mut(0, 0) = Complex64::new(1.0, 0.0);
        *m.at_mut(1, 1) = Complex64::new(2.0, 0.0);
        *m.at_mut(0, 1) = Complex64::new(0.0, 1.0);
        *m.at_mut(1, 0) = Complex64::new(0.0, 1.0); // should be -i
        assert!(HermitianMatrix::new(m, 1e-12).is_err());
    }

    #[test]
    fn hermitian_accepts_and_pins_diagonal() {
        let mut m = CMatrix::zeros(2, 2);
        *m.at_mut(0, 0) = Complex64::new(1.0, 1e-15);
        *m.at_mut(1, 1) = Complex64::new(2.0, 0.0);
        *m.at_mut(0, 1) = Complex64::new(0.5, 0.25);
        *m.at_mut(1, 0) = Complex64::new(0.5, -0.25);
        let h = HermitianMatrix::new(m, 1e-12).unwrap();
        assert_eq!(h.as_cmatrix().at(0, 0).im, 0.0);
        assert_eq!(h.trace(), 3.0);
    }
}
