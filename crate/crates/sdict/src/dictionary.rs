//! Learnable spectral dictionary: K atom triplets (A_k, f_k, phi_k) stored in
//! unconstrained form, materialized to a complex atom matrix for any length.
//!
//! Amplitudes live as softplus preimages and frequencies as scaled-sigmoid
//! preimages, so any finite raw value yields A > 0 and f strictly inside
//! (0, 0.5): gradient descent cannot push an atom to DC, past Nyquist, or to
//! zero gain. Parameters carry no notion of sequence length; materializing at
//! a longer L extends the same exponentials with identical leading rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complex::Complex64;
use crate::error::{Result, SdictError};
use crate::fft;
use crate::matrix::CMatrix;

pub const TAU: f64 = std::f64::consts::TAU;

/// Frequency clamp margin: grid inits keep f inside [FREQ_MARGIN, 0.5 - FREQ_MARGIN].
pub const FREQ_MARGIN: f64 = 1e-4;

const JITTER: f64 = 1e-3;

/// Largest representable frequency strictly below Nyquist; sigmoid saturates
/// to exactly 1.0 in f64 near raw = 37, so derived values are clamped to keep
/// the open-interval invariants true for any finite raw input.
pub const F_MAX: f64 = 0.5 - f64::EPSILON / 4.0;
pub const POS_MIN: f64 = 1e-300;

#[inline]
pub fn softplus(x: f64) -> f64 {
    let v = if x > 30.0 { x } else { x.exp().ln_1p() };
    v.max(POS_MIN)
}

#[inline]
pub fn softplus_inv(a: f64) -> f64 {
    debug_assert!(a > 0.0);
    // ln(e^a - 1), stable for large a.
    if a > 30.0 {
        a
    } else {
        a.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug)]
pub struct SpectralDictionary {
    pub raw_amp: Vec<f64>,
    pub raw_freq: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralDictionary {
    pub fn from_raw(raw_amp: Vec<f64>, raw_freq: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        if raw_amp.len() != raw_freq.len() || raw_amp.len() != phase.len() {
            return Err(SdictError::DimMismatch(format!(
                "triplet lengths differ: {} / {} / {}",
                raw_amp.len(),
                raw_freq.len(),
                phase.len()
            )));
        }
        if raw_amp.is_empty() {
            return Err(SdictError::Capacity { requested: 0, available: 0 });
        }
        for v in raw_amp.iter().chain(&raw_freq).chain(&phase) {
            if !v.is_finite() {
                return Err(SdictError::NonFinite("dictionary parameter".into()));
            }
        }
        Ok(Self { raw_amp, raw_freq, phase })
    }

    /// Build from derived values; amplitudes must be positive and
    /// frequencies strictly inside (0, 0.5).
    pub fn from_derived(amps: &[f64], freqs: &[f64], phases: &[f64]) -> Result<Self> {
        for &a in amps {
            if !(a.is_finite() && a > 0.0) {
                return Err(SdictError::NonFinite(format!("amplitude {a}")));
            }
        }
        for &f in freqs {
            if !(f.is_finite() && f > 0.0 && f < 0.5) {
                return Err(SdictError::NonFinite(format!("frequency {f} outside (0, 0.5)")));
            }
        }
        Self::from_raw(
            amps.iter().map(|&a| softplus_inv(a)).collect(),
            freqs.iter().map(|&f| logit(2.0 * f)).collect(),
            phases.to_vec(),
        )
    }

    pub fn k(&self) -> usize {
        self.raw_amp.len()
    }

    #[inline]
    pub fn amp(&self, k: usize) -> f64 {
        softplus(self.raw_amp[k])
    }

    #[inline]
    pub fn freq(&self, k: usize) -> f64 {
        (0.5 * sigmoid(self.raw_freq[k])).clamp(POS_MIN, F_MAX)
    }

    pub fn amps(&self) -> Vec<f64> {
        (0..self.k()).map(|k| self.amp(k)).collect()
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.k()).map(|k| self.freq(k)).collect()
    }
}

/// Per-position, per-atom phase offsets. Rows beyond the current sequence
/// length are retained so one tensor serves every length up to `l_max`.
#[derive(Clone, Debug)]
pub struct PhaseBias {
    pub l_max: usize,
    pub k: usize,
    /// Row-major [l_max x k].
    pub delta: Vec<f64>,
}

impl PhaseBias {
    pub fn zeros(l_max: usize, k: usize) -> Self {
        Self { l_max, k, delta: vec![0.0; l_max * k] }
    }

    /// Harmonic series: delta[n,k] = 2 pi * base * (k+1) * n, i.e. atom k is
    /// shifted up by the (k+1)-th harmonic of `base`. Applied to near-DC
    /// unit atoms this reproduces the classic sinusoidal positional table.
    pub fn harmonic(l_max: usize, k: usize, base: f64) -> Self {
        let mut delta = vec![0.0; l_max * k];
        for n in 0..l_max {
            for a in 0..k {
                delta[n * k + a] = TAU * base * (a as f64 + 1.0) * n as f64;
            }
        }
        Self { l_max, k, delta }
    }

    #[inline]
    pub fn at(&self, n: usize, k: usize) -> f64 {
        self.delta[n * self.k + k]
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|&v| v == 0.0)
    }
}

/// Materialized atoms plus a fingerprint of the parameters that produced
/// them, so cached derived quantities can be invalidated on parameter change.
#[derive(Clone, Debug)]
pub struct AtomMatrix {
    pub phi: CMatrix,
    pub source_hash: u64,
}

fn fnv1a(seed: u64, words: impl Iterator<Item = u64>) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn dict_hash(dict: &SpectralDictionary, l: usize) -> u64 {
    fnv1a(
        l as u64,
        dict.raw_amp
            .iter()
            .chain(&dict.raw_freq)
            .chain(&dict.phase)
            .map(|v| v.to_bits()),
    )
}

/// phi[n,k] = A_k exp(i (2 pi f_k n + phi_k)) for n = 0..L-1.
pub fn materialize(dict: &SpectralDictionary, l: usize) -> AtomMatrix {
    assert!(l >= 1, "materialize needs L >= 1");
    let k = dict.k();
    let mut phi = CMatrix::zeros(l, k);
    for (kk, ((&_ra, amp), (freq, &ph))) in dict
        .raw_amp
        .iter()
        .zip(dict.amps())
        .zip(dict.freqs().into_iter().zip(&dict.phase))
        .enumerate()
    {
        let w = TAU * freq;
        for n in 0..l {
            *phi.at_mut(n, kk) = Complex64::cis(w * n as f64 + ph).scale(amp);
        }
    }
    AtomMatrix { phi, source_hash: dict_hash(dict, l) }
}

/// phi'[n,k] = phi[n,k] * exp(i delta[n,k]). The bias may be allocated for a
/// longer maximum length; only the first L rows apply.
pub fn modulate(atoms: &AtomMatrix, bias: &PhaseBias) -> Result<AtomMatrix> {
    let l = atoms.phi.rows;
    let k = atoms.phi.cols;
    if bias.k != k {
        return Err(SdictError::DimMismatch(format!(
            "bias has {} atom columns, atoms have {k}",
            bias.k
        )));
    }
    if bias.l_max < l {
        return Err(SdictError::BiasTooShort { have: bias.l_max, need: l });
    }
    let mut out = atoms.phi.clone();
    for n in 0..l {
        for a in 0..k {
            let d = bias.at(n, a);
            if d != 0.0 {
                *out.at_mut(n, a) = out.at(n, a) * Complex64::cis(d);
            }
        }
    }
    let hash = fnv1a(atoms.source_hash, bias.delta.iter().map(|v| v.to_bits()));
    Ok(AtomMatrix { phi: out, source_hash: hash })
}

fn apply_jitter(dict: &mut SpectralDictionary, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..dict.k() {
        dict.raw_amp[k] += rng.gen_range(-JITTER..=JITTER);
        dict.raw_freq[k] += rng.gen_range(-JITTER..=JITTER);
        dict.phase[k] += rng.gen_range(-JITTER..=JITTER);
    }
}

/// Lowest K nonzero DFT bins of a length-L grid: f_k = (k+1)/L, A = 1,
/// phi = 0, then 1e-3 seeded jitter on the raw parameters. A bin landing on
/// Nyquist is clamped just inside the open band.
pub fn init_dft_grid(k: usize, l: usize, seed: u64) -> Result<SpectralDictionary> {
    let available = l / 2;
    if k == 0 || k > available {
        return Err(SdictError::Capacity { requested: k, available });
    }
    let freqs: Vec<f64> = (0..k)
        .map(|i| ((i + 1) as f64 / l as f64).min(0.5 - FREQ_MARGIN))
        .collect();
    let amps = vec![1.0; k];
    let phases = vec![0.0; k];
    let mut dict = SpectralDictionary::from_derived(&amps, &freqs, &phases)?;
    apply_jitter(&mut dict, seed);
    Ok(dict)
}

/// K atoms uniform in mel, mapped back to cycles/token against an 8 kHz
/// pseudo-Nyquist: f_k = 0.5 * (700/8000) * (exp(m_k * ln(1 + 8000/700)) - 1)
/// with m_k = k/(K-1), clamped to [1e-4, 0.5 - 1e-4].
pub fn init_mel(k: usize, seed: u64) -> Result<SpectralDictionary> {
    if k < 2 {
        return Err(SdictError::Capacity { requested: k, available: 2 });
    }
    let span = (1.0f64 + 8000.0 / 700.0).ln();
    let freqs: Vec<f64> = (0..k)
        .map(|i| {
            let m = i as f64 / (k - 1) as f64;
            let f = 0.5 * (700.0 / 8000.0) * ((m * span).exp() - 1.0);
            f.clamp(FREQ_MARGIN, 0.5 - FREQ_MARGIN)
        })
        .collect();
    let amps = vec![1.0; k];
    let phases = vec![0.0; k];
    let mut dict = SpectralDictionary::from_derived(&amps, &freqs, &phases)?;
    apply_jitter(&mut dict, seed);
    Ok(dict)
}

/// Concatenation of both atom sets. Frequencies that collide with an earlier
/// atom (|f_i - f_j| < 1e-6) are nudged up by 1e-5 until distinct, so the
/// union's Gram stays nonsingular.
pub fn init_union(a: &SpectralDictionary, b: &SpectralDictionary) -> Result<SpectralDictionary> {
    let amps: Vec<f64> = a.amps().into_iter().chain(b.amps()).collect();
    let phases: Vec<f64> = a.phase.iter().chain(&b.phase).copied().collect();
    let mut freqs: Vec<f64> = a.freqs().into_iter().chain(b.freqs()).collect();
    for j in 1..freqs.len() {
        loop {
            let clash = freqs[..j].iter().any(|&f| (f - freqs[j]).abs() < 1e-6);
            if !clash {
                break;
            }
            freqs[j] += 1e-5;
        }
        freqs[j] = freqs[j].min(0.5 - FREQ_MARGIN / 2.0);
    }
    SpectralDictionary::from_derived(&amps, &freqs, &phases)
}

/// Log-scaled magnitude spectrum of one materialized atom:
/// log(1 + |fft(column k)|). L must be a power of two.
pub fn atom_spectrum(dict: &SpectralDictionary, k: usize, l: usize) -> Result<Vec<f64>> {
    if k >= dict.k() {
        return Err(SdictError::Index(format!("atom {k} of {}", dict.k())));
    }
    let atoms = materialize(dict, l);
    let col: Vec<Complex64> = (0..l).map(|n| atoms.phi.at(n, k)).collect();
    let spec = fft::fft(&col)?;
    Ok(spec.iter().map(|z| z.abs().ln_1p()).collect())
}
