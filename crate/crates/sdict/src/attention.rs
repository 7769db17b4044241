//! Single-head softmax attention, the quadratic baseline the mixer is
//! benchmarked against. The L x L score matrix is materialized on purpose:
//! its Theta(L^2) time and memory are exactly what the comparison measures,
//! so no windowing or chunking tricks here.

use crate::error::{Result, SdictError};
use crate::matrix::{matmul_a_bt_acc, RMatrix};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: RMatrix,
    pub wk: RMatrix,
    pub wv: RMatrix,
    pub wo: RMatrix,
}

impl AttentionWeights {
    /// Deterministic d x d projections scaled by 1/sqrt(d).
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = || {
            let mut m = RMatrix::zeros(d, d);
            for v in m.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
            m
        };
        Self { wq: draw(), wk: draw(), wv: draw(), wo: draw() }
    }
}

pub fn score_matrix_bytes(l: usize) -> usize {
    l * l * std::mem::size_of::<f64>()
}

/// In-place stable softmax over each row.
pub fn softmax_rows(scores: &mut RMatrix) {
    for r in 0..scores.rows {
        let row = &mut scores.data[r * scores.cols..(r + 1) * scores.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Y = softmax(Q K^T / sqrt(d)) V Wo with Q = X Wq, K = X Wk, V = X Wv.
///
/// `score_budget_bytes` caps the score-matrix allocation; exceeding it (or an
/// allocator refusal) returns `Capacity` so callers can record an out-of-memory
/// outcome instead of dying.
pub fn attention_forward(
    x: &RMatrix,
    w: &AttentionWeights,
    score_budget_bytes: Option<usize>,
) -> Result<RMatrix> {
    let l = x.rows;
    let d = x.cols;
    if w.wq.rows != d {
        return Err(SdictError::DimMismatch(format!(
            "weights are {}x{}, input has {d} channels",
            w.wq.rows, w.wq.cols
        )));
    }
    let need = score_matrix_bytes(l);
    if let Some(budget) = score_budget_bytes {
        if need > budget {
            return Err(SdictError::Capacity { requested: need, available: budget });
        }
    }
    let q = x.matmul(&w.wq);
    let k = x.matmul(&w.wk);
    let v = x.matmul(&w.wv);

    let mut score_data: Vec<f64> = Vec::new();
    score_data
        .try_reserve_exact(l * l)
        .map_err(|_| SdictError::Capacity { requested: need, available: 0 })?;
    score_data.resize(l * l, 0.0);
    let mut scores = RMatrix { rows: l, cols: l, data: score_data };
    matmul_a_bt_acc(&q.data, &k.data, &mut scores.data, l, d, l);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for s in scores.data.iter_mut() {
        *s *= inv_sqrt_d;
    }
    softmax_rows(&mut scores);
    Ok(scores.matmul(&v).matmul(&w.wo))
}

/// FLOP model for the baseline, in the same multiply-add units as the mixer
/// counters: L^2 d for scores, L^2 d for the value mix, 4 L d^2 for the four
/// projections, and 4 scalar ops per score entry for the softmax.
pub fn attention_flops(l: usize, d: usize) -> u64 {
    let (l, d) = (l as u64, d as u64);
    2 * l * l * d + 4 * l * d * d + 4 * l * l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> RMatrix {
        let mut m = RMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                *m.at_mut(r, c) = f(r, c);
            }
        }
        m
    }

    #[test]
    fn softmax_rows_are_stochastic_and_order_preserving() {
        let mut s = filled(3, 4, |r, c| (r * 4 + c) as f64 * 0.37 - 2.0);
        *s.at_mut(2, 0) = 700.0; // overflow bait for unshifted exp
        *s.at_mut(2, 1) = 701.0;
        softmax_rows(&mut s);
        for r in 0..3 {
            let row = s.row(r);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            assert!(row.iter().all(|&p| p.is_finite() && p >= 0.0));
        }
        assert!(s.at(2, 1) > s.at(2, 0));
    }

    #[test]
    fn matches_per_element_oracle() {
        let l = 5;
        let d = 3;
        let x = filled(l, d, |r, c| ((r as f64 + 1.3) * (c as f64 - 0.7)).sin());
        let w = AttentionWeights::seeded(d, 42);
        let y = attention_forward(&x, &w, None).unwrap();

        // Oracle: scalar loops straight from the definition.
        let proj = |wm: &RMatrix| {
            let mut out = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..d {
                    for t in 0..d {
                        out[i * d + j] += x.at(i, t) * wm.at(t, j);
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(&w.wq), proj(&w.wk), proj(&w.wv));
        let mut want = RMatrix::zeros(l, d);
        for i in 0..l {
            let mut weights = vec![0.0; l];
            for j in 0..l {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[i * d + t] * k[j * d + t];
                }
                weights[j] = dot / (d as f64).sqrt();
            }
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = weights.iter().map(|s| (s - max).exp()).sum();
            for j in 0..d {
                let mut mixed = 0.0;
                for t in 0..l {
                    let p = (weights[t] - max).exp() / z;
                    for u in 0..d {
                        mixed += p * v[t * d + u] * w.wo.at(u, j);
                    }
                }
                *want.at_mut(i, j) = mixed;
            }
        }
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn flop_model_matches_instrumented_count() {
        // Count multiply-add sites (and 4 scalar ops per softmax entry) by
        // walking the same loops the forward pass runs.
        for &(l, d) in &[(3usize, 2usize), (7, 5), (16, 4)] {
            let mut count: u64 = 0;
            count += 4 * (l * d * d) as u64; // Wq, Wk, Wv, Wo projections
            count += (l * l * d) as u64; // Q K^T
            count += 4 * (l * l) as u64; // softmax
            count += (l * l * d) as u64; // weights * V
            assert_eq!(count, attention_flops(l, d), "({l},{d})");
        }
        assert_eq!(
            attention_flops(1024, 64),
            2 * 1024 * 1024 * 64 + 4 * 1024 * 64 * 64 + 4 * 1024 * 1024
        );
    }

    #[test]
    fn single_token_bypasses_scores_and_identical_tokens_mix_uniformly() {
        // L=1: the single softmax weight is 1, so out = X Wv Wo.
        let d = 4;
        let w = AttentionWeights::seeded(d, 3);
        let x = filled(1, d, |_, c| 0.3 * c as f64 - 0.5);
        let y = attention_forward(&x, &w, None).unwrap();
        let want = x.matmul(&w.wv).matmul(&w.wo);
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-14);
        }

        // Identical tokens: every score row is constant, softmax is 1/L, and
        // the output equals the single-token result repeated.
        let l = 6;
        let mut xr = RMatrix::zeros(l, d);
        for r in 0..l {
            for c in 0..d {
                *xr.at_mut(r, c) = x.at(0, c);
            }
        }
        let yr = attention_forward(&xr, &w, None).unwrap();
        for r in 0..l {
            for c in 0..d {
                assert!((yr.at(r, c) - y.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_refusal_names_sizes() {
        let x = filled(64, 4, |r, c| (r + c) as f64);
        let w = AttentionWeights::seeded(4, 7);
        match attention_forward(&x, &w, Some(1024)) {
            Err(SdictError::Capacity { requested, available }) => {
                assert_eq!(requested, 64 * 64 * 8);
                assert_eq!(available, 1024);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        assert!(attention_forward(&x, &w, Some(64 * 64 * 8)).is_ok());
    }
}
