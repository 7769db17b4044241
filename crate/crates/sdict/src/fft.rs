//! Iterative radix-2 Cooley-Tukey FFT.
//!
//! The forward transform is unnormalized, X[m] = sum_n x[n] exp(-i 2 pi n m / L),
//! and the inverse carries the 1/L factor, so ifft(fft(x)) == x and Parseval
//! reads ||x||^2 == ||fft(x)||^2 / L. Lengths must be powers of two (L = 1 is
//! allowed and is the identity). Plans hold the bit-reversal permutation and
//! per-stage twiddle tables; they are built once per length, cached behind a
//! mutex, and immutable afterwards, so concurrent transforms on different
//! buffers are safe.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::complex::Complex64;
use crate::error::{Result, SdictError};

pub struct FftPlan {
    len: usize,
    log2_len: u32,
    bitrev: Vec<u32>,
    /// Stage s (block size 2^(s+1)) owns the slice [2^s - 1, 2^(s+1) - 1):
    /// twiddles w^j = exp(-i 2 pi j / 2^(s+1)) for j in 0..2^s.
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(SdictError::NotPowerOfTwo(len));
        }
        let log2_len = len.trailing_zeros();
        let mut bitrev = Vec::with_capacity(len);
        for i in 0..len as u64 {
            let r = if log2_len == 0 { 0 } else { i.reverse_bits() >> (64 - log2_len) };
            bitrev.push(r as u32);
        }
        let mut twiddles = Vec::with_capacity(len.saturating_sub(1));
        let mut block = 2usize;
        while block <= len {
            let half = block / 2;
            let step = -2.0 * std::f64::consts::PI / block as f64;
            for j in 0..half {
                twiddles.push(Complex64::cis(step * j as f64));
            }
            block *= 2;
        }
        Ok(Self { len, log2_len, bitrev, twiddles })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// In-place forward transform. `buf.len()` must equal the plan length.
    pub fn fft_in_place(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len, "buffer length mismatch");
        for i in 0..self.len {
            let j = self.bitrev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut block = 2usize;
        let mut toff = 0usize;
        while block <= self.len {
            let half = block / 2;
            let tw = &self.twiddles[toff..toff + half];
            let mut start = 0;
            while start < self.len {
                for j in 0..half {
                    let lo = start + j;
                    let hi = lo + half;
                    let t = tw[j] * buf[hi];
                    let a = buf[lo];
                    buf[lo] = a + t;
                    buf[hi] = a - t;
                }
                start += block;
            }
            toff += half;
            block *= 2;
        }
        let _ = self.log2_len;
    }

    /// In-place inverse transform (includes the 1/L normalization).
    pub fn ifft_in_place(&self, buf: &mut [Complex64]) {
        for z in buf.iter_mut() {
            *z = z.conj();
        }
        self.fft_in_place(buf);
        let inv = 1.0 / self.len as f64;
        for z in buf.iter_mut() {
            *z = z.conj().scale(inv);
        }
    }
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<FftPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<FftPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fetch (or build and cache) the plan for `len`.
pub fn plan(len: usize) -> Result<Arc<FftPlan>> {
    let mut cache = plan_cache().lock().unwrap_or_else(|e| e.into_inner());
    if let Some(p) = cache.get(&len) {
        return Ok(p.clone());
    }
    let p = Arc::new(FftPlan::new(len)?);
    cache.insert(len, p.clone());
    Ok(p)
}

/// Out-of-place forward transform.
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let p = plan(x.len())?;
    let mut buf = x.to_vec();
    p.fft_in_place(&mut buf);
    Ok(buf)
}

/// Out-of-place inverse transform.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let p = plan(x.len())?;
    let mut buf = x.to_vec();
    p.ifft_in_place(&mut buf);
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(L^2) direct transform used as the independent reference.
    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        let mut out = vec![Complex64::default(); n];
        for (m, o) in out.iter_mut().enumerate() {
            let mut acc = Complex64::default();
            for (k, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k as f64) * (m as f64) / n as f64;
                acc += v * Complex64::cis(ang);
            }
            *o = acc;
        }
        out
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn four_point_reference() {
        let x: Vec<Complex64> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| c(v, 0.0)).collect();
        let y = fft(&x).unwrap();
        let want = [c(10.0, 0.0), c(-2.0, 2.0), c(-2.0, 0.0), c(-2.0, -2.0)];
        for (got, want) in y.iter().zip(&want) {
            assert!((*got - *want).abs() < 1e-12, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn length_one_is_identity() {
        let x = vec![c(3.5, -1.25)];
        assert_eq!(fft(&x).unwrap(), x);
        assert_eq!(ifft(&x).unwrap(), x);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = vec![c(0.0, 0.0); 12];
        assert!(matches!(fft(&x), Err(SdictError::NotPowerOfTwo(12))));
        assert!(matches!(FftPlan::new(0), Err(SdictError::NotPowerOfTwo(0))));
    }

    #[test]
    fn matches_naive_dft_up_to_64() {
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for log in 0..=6 {
            let n = 1usize << log;
            let x: Vec<Complex64> = (0..n).map(|_| c(next(), next())).collect();
            let fast = fft(&x).unwrap();
            let slow = naive_dft(&x);
            let scale = slow.iter().map(|z| z.abs()).fold(1e-30, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((*a - *b).abs() / scale < 1e-10, "L={n}");
            }
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for log in 0..=12 {
            let n = 1usize << log;
            let x: Vec<Complex64> = (0..n).map(|_| c(next(), next())).collect();
            let y = fft(&x).unwrap();
            let back = ifft(&y).unwrap();
            let mut err: f64 = 0.0;
            for (a, b) in back.iter().zip(&x) {
                err = err.max((*a - *b).abs());
            }
            assert!(err < 1e-12, "roundtrip L={n} err={err:e}");

            let ex: f64 = x.iter().map(|z| z.norm_sq()).sum();
            let ey: f64 = y.iter().map(|z| z.norm_sq()).sum();
            assert!((ex - ey / n as f64).abs() <= 1e-10 * ex.max(1.0), "parseval L={n}");
        }
    }
}
