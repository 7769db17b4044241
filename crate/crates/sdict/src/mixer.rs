//! The spectral-dictionary token mixer.
//!
//! A layer analyzes the input against K atoms by regularized least squares,
//! gates each coefficient with a per-channel complex gain, and synthesizes
//! through the phase-biased atoms:
//!
//!   C  = (Phi^H Phi + ridge')^-1 Phi^H X        (analysis, one K-vector per channel)
//!   C' = C gated elementwise by S               (c'[k,j] = c[k,j] * S[j,k])
//!   Y  = 2 Re(Phi_Delta C')                     (synthesis)
//!
//! The factor 2 is the conjugate-pair completion. Each complex atom stands
//! for itself and its conjugate twin: a real signal splits its energy evenly
//! between the pair, so analysis against the single-sided atom recovers half
//! the pair's coefficient, and synthesis sums both members, Phi C' + conj =
//! 2 Re(Phi C'). Without the completion the layer would halve every mid-band
//! component and could not fix its own range; with it, an on-grid dictionary
//! whose bins avoid DC and Nyquist is exactly the orthogonal projector onto
//! the atoms' real span (idempotent and energy non-expansive) when S = 1 and
//! Delta = 0.
//!
//! Two execution paths produce identical outputs on their shared domain. The
//! dense path materializes Phi and runs for any L >= 1. The FFT-grid path
//! requires every frequency on the 1/L bin grid, a power-of-two L, and a zero
//! phase bias; it replaces the L x K analysis and synthesis products with one
//! FFT per channel each way plus a closed-form K x K Gram, which is what
//! collapses the cost to Theta(d L log L) plus L-independent solve terms.

use crate::complex::Complex64;
use crate::dictionary::{materialize, modulate, AtomMatrix, PhaseBias, SpectralDictionary};
use crate::error::{Result, SdictError};
use crate::fft;
use crate::linalg::{gram, solve_hpd};
use crate::matrix::{CMatrix, HermitianMatrix, RMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerPath {
    Dense,
    FftGrid,
}

/// Analysis coefficients: one length-K complex vector per output channel.
#[derive(Clone, Debug)]
pub struct CoeffMatrix {
    /// K x d.
    pub c: CMatrix,
}

#[derive(Clone, Debug)]
pub struct SDictMixer {
    pub dict: SpectralDictionary,
    /// d x K complex atom-channel gains.
    pub gate_s: CMatrix,
    pub bias: PhaseBias,
    pub path: MixerPath,
    pub ridge: f64,
}

impl SDictMixer {
    pub fn new(
        dict: SpectralDictionary,
        gate_s: CMatrix,
        bias: PhaseBias,
        path: MixerPath,
        ridge: f64,
    ) -> Result<Self> {
        if gate_s.cols != dict.k() || bias.k != dict.k() {
            return Err(SdictError::DimMismatch(format!(
                "gate is {}x{} and bias has {} atom columns for a {}-atom dictionary",
                gate_s.rows,
                gate_s.cols,
                bias.k,
                dict.k()
            )));
        }
        Ok(Self { dict, gate_s, bias, path, ridge })
    }

    /// All-ones gate, zero bias: the layer starts as the pure projector.
    pub fn projector(dict: SpectralDictionary, d: usize, l_max: usize, path: MixerPath) -> Self {
        let k = dict.k();
        let mut gate = CMatrix::zeros(d, k);
        for z in gate.data.iter_mut() {
            *z = Complex64::new(1.0, 0.0);
        }
        Self {
            bias: PhaseBias::zeros(l_max, k),
            gate_s: gate,
            dict,
            path,
            ridge: crate::linalg::DEFAULT_RIDGE,
        }
    }
}

/// Least-squares analysis: c = (Phi^H Phi + ridge * trace/K)^-1 Phi^H X.
pub fn analyze(phi: &AtomMatrix, x: &RMatrix, ridge: f64) -> Result<CoeffMatrix> {
    if phi.phi.rows != x.rows {
        return Err(SdictError::DimMismatch(format!(
            "atoms have {} rows, input has {}",
            phi.phi.rows, x.rows
        )));
    }
    let g = gram(&phi.phi);
    let b = phi.phi.conj_t_matmul_real(x);
    let c = solve_hpd(&g, &b, ridge)?;
    Ok(CoeffMatrix { c })
}

/// Elementwise atom-channel gain: c'[k,j] = c[k,j] * S[j,k]. Theta(Kd).
pub fn gate(c: &CoeffMatrix, s: &CMatrix) -> Result<CoeffMatrix> {
    let (k, d) = (c.c.rows, c.c.cols);
    if s.rows != d || s.cols != k {
        return Err(SdictError::DimMismatch(format!(
            "gate is {}x{}, coefficients are {k}x{d}",
            s.rows, s.cols
        )));
    }
    let mut out = c.c.clone();
    for kk in 0..k {
        for j in 0..d {
            *out.at_mut(kk, j) = c.c.at(kk, j) * s.at(j, kk);
        }
    }
    Ok(CoeffMatrix { c: out })
}

/// Y = Re(phi_mod * c).
pub fn synthesize(phi_mod: &AtomMatrix, c: &CoeffMatrix) -> RMatrix {
    assert_eq!(phi_mod.phi.cols, c.c.rows, "atom/coefficient K mismatch");
    let l = phi_mod.phi.rows;
    let d = c.c.cols;
    let mut y = RMatrix::zeros(l, d);
    for n in 0..l {
        let prow = phi_mod.phi.row(n);
        let orow = &mut y.data[n * d..(n + 1) * d];
        for (k, &p) in prow.iter().enumerate() {
            let crow = c.c.row(k);
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += p.re * cv.re - p.im * cv.im;
            }
        }
    }
    y
}

/// Squared-Frobenius reconstruction error, averaged over batch elements.
pub fn rec_loss(xs: &[RMatrix], ys: &[RMatrix]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "batch size mismatch");
    assert!(!xs.is_empty(), "empty batch");
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            assert_eq!((x.rows, x.cols), (y.rows, y.cols), "sample dims mismatch");
            x.data
                .iter()
                .zip(&y.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    total / xs.len() as f64
}

/// Sum of complex moduli of the gate entries.
pub fn l1_penalty(s: &CMatrix) -> f64 {
    s.data.iter().map(|z| z.abs()).sum()
}

/// Integer FLOP model. One complex multiply-add counts as 8 real FLOPs; an
/// FFT of length N counts the classic 5 N log2 N; elementwise scalings and
/// real-part extraction count zero. The constants are a fixed convention,
/// chosen so path costs are comparable and the FFT path's L-dependence is
/// exactly the transform term.
pub const CMAC_FLOPS: u64 = 8;

pub fn fft_flops(l: usize) -> u64 {
    5 * l as u64 * l.trailing_zeros() as u64
}

pub fn sdict_dense_flops(l: usize, k: usize, d: usize) -> u64 {
    let (l, k, d) = (l as u64, k as u64, d as u64);
    // Gram, analysis product, Cholesky, two triangular solves, gate, synthesis.
    CMAC_FLOPS * (l * k * k + l * k * d + k * k * k / 3 + 2 * k * k * d + k * d + l * k * d)
}

pub fn sdict_fft_flops(l: usize, k: usize, d: usize) -> u64 {
    let (k, d) = (k as u64, d as u64);
    // One analysis FFT and one synthesis FFT per channel; closed-form Gram,
    // Cholesky, two triangular solves, bin gather/scatter scalings, gate.
    2 * d * fft_flops(l) + CMAC_FLOPS * (k * k + k * k * k / 3 + 2 * k * k * d + 3 * k * d)
}

fn bin_of(freq: f64, l: usize, atom: usize) -> Result<usize> {
    let exact = freq * l as f64;
    let bin = exact.round() as usize;
    let err = (freq - bin as f64 / l as f64).abs();
    if err > 1e-9 {
        return Err(SdictError::OffGrid { atom, freq, len: l, bin, err });
    }
    Ok(bin)
}

fn on_grid_bins(dict: &SpectralDictionary, l: usize) -> Result<Vec<usize>> {
    (0..dict.k()).map(|k| bin_of(dict.freq(k), l, k)).collect()
}

/// FFT-path analysis: per channel, transform, gather the atom bins, scale by
/// conj(A_k e^{i phi_k}), then the usual K x K Gram solve. Equals `analyze`
/// on every legal configuration.
pub fn analyze_fft(m: &SDictMixer, x: &RMatrix) -> Result<CoeffMatrix> {
    let l = x.rows;
    let d = x.cols;
    let k = m.dict.k();
    let bins = on_grid_bins(&m.dict, l)?;
    let plan = fft::plan(l)?;

    let amps = m.dict.amps();
    let phases = &m.dict.phase;
    let mut b = CMatrix::zeros(k, d);
    let mut buf = vec![Complex64::default(); l];
    for j in 0..d {
        for n in 0..l {
            buf[n] = Complex64::new(x.at(n, j), 0.0);
        }
        plan.fft_in_place(&mut buf);
        for kk in 0..k {
            let scale = Complex64::cis(-phases[kk]).scale(amps[kk]);
            *b.at_mut(kk, j) = scale * buf[bins[kk]];
        }
    }

    let g = on_grid_gram(&amps, phases, &bins, l);
    let c = solve_hpd(&g, &b, m.ridge)?;
    Ok(CoeffMatrix { c })
}

/// Closed-form Gram for on-grid atoms: columns at distinct bins are exactly
/// orthogonal, shared bins give A_k A_l e^{i(phi_l - phi_k)} L.
fn on_grid_gram(amps: &[f64], phases: &[f64], bins: &[usize], l: usize) -> HermitianMatrix {
    let k = amps.len();
    let mut g = CMatrix::zeros(k, k);
    for a in 0..k {
        *g.at_mut(a, a) = Complex64::new(amps[a] * amps[a] * l as f64, 0.0);
        for b in (a + 1)..k {
            if bins[a] == bins[b] {
                let v = Complex64::cis(phases[b] - phases[a]).scale(amps[a] * amps[b] * l as f64);
                *g.at_mut(a, b) = v;
                *g.at_mut(b, a) = v.conj();
            }
        }
    }
    HermitianMatrix::new(g, 0.0).expect("mirrored construction is hermitian")
}

/// Full mixer forward: Y = 2 Re(Phi_Delta * (S-gated analysis of X)).
pub fn sdict_forward(m: &SDictMixer, x: &RMatrix) -> Result<RMatrix> {
    Ok(sdict_forward_costed(m, x)?.0)
}

/// Forward plus the FLOP count of the executed path.
pub fn sdict_forward_costed(m: &SDictMixer, x: &RMatrix) -> Result<(RMatrix, u64)> {
    if !x.is_finite() {
        return Err(SdictError::NonFinite("mixer input".into()));
    }
    let d = x.cols;
    if m.gate_s.rows != d {
        return Err(SdictError::DimMismatch(format!(
            "gate expects {} channels, input has {d}",
            m.gate_s.rows
        )));
    }
    let l = x.rows;
    let k = m.dict.k();
    match m.path {
        MixerPath::Dense => {
            let atoms = materialize(&m.dict, l);
            let coeffs = analyze(&atoms, x, m.ridge)?;
            let gated = gate(&coeffs, &m.gate_s)?;
            let doubled = CoeffMatrix {
                c: CMatrix {
                    rows: gated.c.rows,
                    cols: gated.c.cols,
                    data: gated.c.data.iter().map(|z| z.scale(2.0)).collect(),
                },
            };
            let phi_mod = modulate(&atoms, &m.bias)?;
            let y = synthesize(&phi_mod, &doubled);
            Ok((y, sdict_dense_flops(l, k, d)))
        }
        MixerPath::FftGrid => {
            if let Some(first) = first_biased_atom(&m.bias) {
                return Err(SdictError::BiasedFftPath { atom: first });
            }
            let bins = on_grid_bins(&m.dict, l)?;
            let plan = fft::plan(l)?;
            let coeffs = analyze_fft(m, x)?;
            let gated = gate(&coeffs, &m.gate_s)?;

            let amps = m.dict.amps();
            let mut y = RMatrix::zeros(l, d);
            let mut buf = vec![Complex64::default(); l];
            for j in 0..d {
                for z in buf.iter_mut() {
                    *z = Complex64::default();
                }
                for kk in 0..k {
                    let scale = Complex64::cis(m.dict.phase[kk]).scale(amps[kk]);
                    buf[bins[kk]] += scale * gated.c.at(kk, j);
                }
                plan.ifft_in_place(&mut buf);
                // ifft carries 1/L; undo it and apply the conjugate-pair 2.
                let s = 2.0 * l as f64;
                for n in 0..l {
                    *y.at_mut(n, j) = s * buf[n].re;
                }
            }
            Ok((y, sdict_fft_flops(l, k, d)))
        }
    }
}

fn first_biased_atom(bias: &PhaseBias) -> Option<usize> {
    for n in 0..bias.l_max {
        for k in 0..bias.k {
            if bias.at(n, k) != 0.0 {
                return Some(k);
            }
        }
    }
    None
}
