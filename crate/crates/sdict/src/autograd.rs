//! Reverse-mode autodiff on an append-only tape.
//!
//! Nodes are recorded in evaluation order, so every input of a node has a
//! smaller id and `backward` is a single reverse sweep with no explicit
//! topological sort. Within a sweep gradients accumulate, so a node consumed
//! twice receives the sum of both contributions; across sweeps `backward`
//! resets and is idempotent. Tapes are single-use per step and cheap to
//! rebuild.
//!
//! The spectral mixer is one fused op rather than a chain of complex
//! primitives: the tape stays real-valued at its seams, and the op reuses the
//! forward Cholesky factorization for the adjoint solve, which a generic
//! decomposition into matmuls would recompute. Complex parameters (gates)
//! live as real tensors with interleaved re/im pairs.
//!
//! Gradient convention for the complex internals: for L real and z = u + iv,
//! grad z = dL/du + i dL/dv, so dL = Re tr(G^H dZ) and real parameters fall
//! out as plain components.

use std::collections::HashMap;

use crate::complex::Complex64;
use crate::dictionary::{softplus, F_MAX, POS_MIN, TAU};
use crate::error::{Result, SdictError};
use crate::linalg::cholesky;
use crate::matrix::{matmul_a_bt_acc, matmul_at_b_acc, CMatrix, RMatrix};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;
pub type ParamId = usize;

/// Named parameter tensors in stable declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<RMatrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, init: RMatrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(SdictError::Config(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(init);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &RMatrix {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut RMatrix {
        &mut self.tensors[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// (id, name, tensor) in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &RMatrix)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, self.names[i].as_str(), t))
    }
}

struct SdictCtx {
    phi: CMatrix,
    e: CMatrix,
    c: CMatrix,
    c_gated: CMatrix,
    factor: crate::linalg::CholeskyFactor,
}

enum Op {
    Input,
    Param,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a 1 x n row to every row of an m x n tensor.
    AddBroadcastRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(NodeId, NodeId),
    SliceRows {
        src: NodeId,
        start: usize,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-row (mean, 1/std).
        cache: Vec<(f64, f64)>,
    },
    Gelu(NodeId),
    Softplus(NodeId),
    SigmoidHalf(NodeId),
    Sdict {
        x: NodeId,
        amp: NodeId,
        freq: NodeId,
        phase: NodeId,
        gate: NodeId,
        delta: NodeId,
        ridge: f64,
        ctx: Box<SdictCtx>,
    },
    SumSq(NodeId),
    CeSmoothedMean {
        logits: NodeId,
        targets: Vec<usize>,
        eps: f64,
        probs: RMatrix,
    },
    BceWithLogitsMean {
        logits: NodeId,
        targets: Vec<f64>,
    },
    /// Sum of complex moduli over an interleaved re/im tensor.
    L1Complex(NodeId),
}

struct Node {
    op: Op,
    value: RMatrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<RMatrix>,
    param_nodes: HashMap<ParamId, NodeId>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

/// Entropy of the smoothed target distribution: the exact lower bound of the
/// smoothed cross entropy, reached when predictions equal the targets.
pub fn smoothed_ce_floor(eps: f64, vocab: usize) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    let v = vocab as f64;
    let hot = 1.0 - eps + eps / v;
    let cold = eps / v;
    -(hot * hot.ln() + (v - 1.0) * cold * cold.ln())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: RMatrix) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &RMatrix {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> &RMatrix {
        &self.grads[id]
    }

    pub fn input(&mut self, value: RMatrix) -> NodeId {
        self.push(Op::Input, value)
    }

    /// One node per parameter per tape; repeated calls return the same node
    /// so every consumer accumulates into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, store.get(id).clone());
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::Matmul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let mut v = va.clone();
        for (o, &x) in v.data.iter_mut().zip(&vb.data) {
            *o += x;
        }
        self.push(Op::Add(a, b), v)
    }

    pub fn add_broadcast_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(vr.rows, 1, "broadcast row must be 1 x n");
        assert_eq!(va.cols, vr.cols, "broadcast width");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += vr.at(0, c);
            }
        }
        self.push(Op::AddBroadcastRow(a, row), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape");
        let mut v = va.clone();
        for (o, &x) in v.data.iter_mut().zip(&vb.data) {
            *o -= x;
        }
        self.push(Op::Sub(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for o in v.data.iter_mut() {
            *o *= s;
        }
        self.push(Op::Scale(a, s), v)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols, vb.cols, "concat width");
        let mut v = RMatrix::zeros(va.rows + vb.rows, va.cols);
        v.data[..va.data.len()].copy_from_slice(&va.data);
        v.data[va.data.len()..].copy_from_slice(&vb.data);
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let vs = &self.nodes[src].value;
        assert!(start + len <= vs.rows, "slice bounds");
        let mut v = RMatrix::zeros(len, vs.cols);
        v.data
            .copy_from_slice(&vs.data[start * vs.cols..(start + len) * vs.cols]);
        self.push(Op::SliceRows { src, start }, v)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let vt = &self.nodes[table].value;
        let mut v = RMatrix::zeros(idx.len(), vt.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < vt.rows, "gather index {i} out of {}", vt.rows);
            v.data[r * vt.cols..(r + 1) * vt.cols]
                .copy_from_slice(&vt.data[i * vt.cols..(i + 1) * vt.cols]);
        }
        self.push(Op::GatherRows { table, idx: idx.to_vec() }, v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (vg, vb) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        assert_eq!(vg.rows, 1);
        assert_eq!(vb.rows, 1);
        assert_eq!(vg.cols, vx.cols);
        assert_eq!(vb.cols, vx.cols);
        let d = vx.cols as f64;
        let mut v = RMatrix::zeros(vx.rows, vx.cols);
        let mut cache = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            cache.push((mean, rstd));
            for c in 0..vx.cols {
                *v.at_mut(r, c) = (row[c] - mean) * rstd * vg.at(0, c) + vb.at(0, c);
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, cache }, v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for o in v.data.iter_mut() {
            *o = gelu_scalar(*o);
        }
        self.push(Op::Gelu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for o in v.data.iter_mut() {
            *o = softplus(*o);
        }
        self.push(Op::Softplus(a), v)
    }

    /// 0.5 * sigmoid, the frequency reparameterization. Clamped exactly like
    /// the dictionary's derived accessor so tape and inference agree bitwise.
    pub fn sigmoid_half(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for o in v.data.iter_mut() {
            *o = (0.5 * sigmoid(*o)).clamp(POS_MIN, F_MAX);
        }
        self.push(Op::SigmoidHalf(a), v)
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().map(|&x| x * x).sum();
        let mut v = RMatrix::zeros(1, 1);
        v.data[0] = s;
        self.push(Op::SumSq(a), v)
    }

    /// Mean over rows of cross entropy against label-smoothed one-hot targets.
    pub fn ce_smoothed_mean(&mut self, logits: NodeId, targets: &[usize], eps: f64) -> NodeId {
        let vl = &self.nodes[logits].value;
        assert_eq!(vl.rows, targets.len(), "one target per row");
        let vocab = vl.cols;
        let mut probs = RMatrix::zeros(vl.rows, vocab);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < vocab, "target {t} out of vocab {vocab}");
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..vocab {
                let e = (row[c] - max).exp();
                *probs.at_mut(r, c) = e;
                z += e;
            }
            let logz = z.ln() + max;
            for c in 0..vocab {
                *probs.at_mut(r, c) /= z;
            }
            // loss_r = -sum_v q_v log p_v with q = (1-eps) onehot + eps/V.
            let mut row_loss = (1.0 - eps) * (logz - row[t]);
            for c in 0..vocab {
                row_loss += eps / vocab as f64 * (logz - row[c]);
            }
            total += row_loss;
        }
        let mut v = RMatrix::zeros(1, 1);
        v.data[0] = total / targets.len() as f64;
        self.push(
            Op::CeSmoothedMean { logits, targets: targets.to_vec(), eps, probs },
            v,
        )
    }

    /// Mean over classes of binary cross entropy on logits.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let vl = &self.nodes[logits].value;
        assert_eq!(vl.rows, 1, "single logit row");
        assert_eq!(vl.cols, targets.len());
        let mut total = 0.0;
        for (c, &t) in targets.iter().enumerate() {
            let z = vl.at(0, c);
            // Stable: max(z,0) - z t + ln(1 + exp(-|z|)).
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let mut v = RMatrix::zeros(1, 1);
        v.data[0] = total / targets.len() as f64;
        self.push(Op::BceWithLogitsMean { logits, targets: targets.to_vec() }, v)
    }

    /// Sum of moduli over interleaved complex pairs (cols must be even).
    pub fn l1_complex(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        assert_eq!(va.cols % 2, 0, "interleaved complex needs even cols");
        let mut s = 0.0;
        for p in va.data.chunks_exact(2) {
            s += p[0].hypot(p[1]);
        }
        let mut v = RMatrix::zeros(1, 1);
        v.data[0] = s;
        self.push(Op::L1Complex(a), v)
    }

    /// Fused spectral-mixer forward on the dense path.
    ///
    /// `amp`, `freq`, `phase` are 1 x K derived values (already through their
    /// reparameterizations), `gate` is d x 2K interleaved re/im, and `delta`
    /// is a phase-bias table whose first L rows apply (capacity beyond L is
    /// carried unused so longer inputs need no reallocation).
    pub fn sdict(
        &mut self,
        x: NodeId,
        amp: NodeId,
        freq: NodeId,
        phase: NodeId,
        gate: NodeId,
        delta: NodeId,
        ridge: f64,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let l = vx.rows;
        let d = vx.cols;
        let k = self.nodes[amp].value.data.len();
        assert_eq!(self.nodes[freq].value.data.len(), k);
        assert_eq!(self.nodes[phase].value.data.len(), k);
        let vg = &self.nodes[gate].value;
        assert_eq!((vg.rows, vg.cols), (d, 2 * k), "gate shape");
        let vd = &self.nodes[delta].value;
        if vd.rows < l {
            return Err(SdictError::BiasTooShort { have: vd.rows, need: l });
        }
        assert_eq!(vd.cols, k, "delta atom count");

        let amps = &self.nodes[amp].value.data;
        let freqs = &self.nodes[freq].value.data;
        let phases = &self.nodes[phase].value.data;

        let mut phi = CMatrix::zeros(l, k);
        let mut e = CMatrix::zeros(l, k);
        for n in 0..l {
            for kk in 0..k {
                *phi.at_mut(n, kk) =
                    Complex64::cis(TAU * freqs[kk] * n as f64 + phases[kk]).scale(amps[kk]);
                *e.at_mut(n, kk) = Complex64::cis(vd.at(n, kk));
            }
        }

        let mut g = phi.conj_t_matmul(&phi);
        let trace: f64 = (0..k).map(|i| g.at(i, i).re).sum();
        let bump = ridge * trace / k as f64;
        for i in 0..k {
            g.at_mut(i, i).re += bump;
        }
        let factor = cholesky(&g)?;
        let b = phi.conj_t_matmul_real(vx);
        let mut c = b;
        factor.solve_in_place(&mut c);

        let mut c_gated = c.clone();
        for kk in 0..k {
            for j in 0..d {
                let s = Complex64::new(vg.at(j, 2 * kk), vg.at(j, 2 * kk + 1));
                *c_gated.at_mut(kk, j) = c.at(kk, j) * s;
            }
        }

        let mut y = RMatrix::zeros(l, d);
        for n in 0..l {
            for kk in 0..k {
                let p = phi.at(n, kk) * e.at(n, kk);
                for j in 0..d {
                    let cv = c_gated.at(kk, j);
                    *y.at_mut(n, j) += 2.0 * (p.re * cv.re - p.im * cv.im);
                }
            }
        }

        let ctx = Box::new(SdictCtx { phi, e, c: c.clone(), c_gated, factor });
        Ok(self.push(
            Op::Sdict { x, amp, freq, phase, gate, delta, ridge, ctx },
            y,
        ))
    }

    /// Reverse sweep from a scalar node. Any gradients from an earlier sweep
    /// are cleared first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: NodeId) {
        let lv = &self.nodes[loss].value;
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward target must be scalar");
        for g in self.grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v = 0.0;
            }
        }
        if self.grads.len() < self.nodes.len() {
            for n in self.grads.len()..self.nodes.len() {
                let v = &self.nodes[n].value;
                self.grads.push(RMatrix::zeros(v.rows, v.cols));
            }
        }
        self.grads[loss].data[0] = 1.0;

        for id in (0..=loss).rev() {
            if self.grads[id].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            // Take the node's gradient out to appease the borrow checker;
            // a node never feeds itself.
            let g = std::mem::replace(&mut self.grads[id], RMatrix::zeros(0, 0));
            self.propagate(id, &g);
            self.grads[id] = g;
        }
    }

    fn propagate(&mut self, id: NodeId, g: &RMatrix) {
        match &self.nodes[id].op {
            Op::Input | Op::Param => {}
            &Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, kk, n) = (va.rows, va.cols, vb.cols);
                let mut ga = RMatrix::zeros(m, kk);
                matmul_a_bt_acc(&g.data, &vb.data, &mut ga.data, m, n, kk);
                let mut gb = RMatrix::zeros(kk, n);
                matmul_at_b_acc(&va.data, &g.data, &mut gb.data, m, kk, n);
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            &Op::AddBroadcastRow(a, row) => {
                self.accumulate(a, g);
                let mut gr = RMatrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gr.data[c] += g.at(r, c);
                    }
                }
                self.accumulate(row, &gr);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g);
                let mut gb = g.clone();
                for v in gb.data.iter_mut() {
                    *v = -*v;
                }
                self.accumulate(b, &gb);
            }
            &Op::Scale(a, s) => {
                let mut ga = g.clone();
                for v in ga.data.iter_mut() {
                    *v *= s;
                }
                self.accumulate(a, &ga);
            }
            &Op::ConcatRows(a, b) => {
                let ra = self.nodes[a].value.rows;
                let cols = g.cols;
                let ga = RMatrix { rows: ra, cols, data: g.data[..ra * cols].to_vec() };
                let gb = RMatrix {
                    rows: g.rows - ra,
                    cols,
                    data: g.data[ra * cols..].to_vec(),
                };
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            &Op::SliceRows { src, start } => {
                let vs = &self.nodes[src].value;
                let mut gs = RMatrix::zeros(vs.rows, vs.cols);
                gs.data[start * vs.cols..start * vs.cols + g.data.len()]
                    .copy_from_slice(&g.data);
                self.accumulate(src, &gs);
            }
            Op::GatherRows { table, idx } => {
                let (table, idx) = (*table, idx.clone());
                let vt = &self.nodes[table].value;
                let mut gt = RMatrix::zeros(vt.rows, vt.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..vt.cols {
                        *gt.at_mut(i, c) += g.at(r, c);
                    }
                }
                self.accumulate(table, &gt);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let cache = cache.clone();
                let vx = &self.nodes[x].value;
                let vg = &self.nodes[gamma].value;
                let d = vx.cols as f64;
                let mut gx = RMatrix::zeros(vx.rows, vx.cols);
                let mut gg = RMatrix::zeros(1, vx.cols);
                let mut gb = RMatrix::zeros(1, vx.cols);
                for r in 0..vx.rows {
                    let (mean, rstd) = cache[r];
                    let row = vx.row(r);
                    let grow = g.row(r);
                    let mut sum_dyg = 0.0;
                    let mut sum_dyg_xhat = 0.0;
                    for c in 0..vx.cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dyg = grow[c] * vg.at(0, c);
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        gg.data[c] += grow[c] * xhat;
                        gb.data[c] += grow[c];
                    }
                    for c in 0..vx.cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dyg = grow[c] * vg.at(0, c);
                        *gx.at_mut(r, c) =
                            rstd * (dyg - sum_dyg / d - xhat * sum_dyg_xhat / d);
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            &Op::Gelu(a) => {
                let va = &self.nodes[a].value;
                let mut ga = g.clone();
                for (gv, &xv) in ga.data.iter_mut().zip(&va.data) {
                    *gv *= gelu_grad_scalar(xv);
                }
                self.accumulate(a, &ga);
            }
            &Op::Softplus(a) => {
                let va = &self.nodes[a].value;
                let mut ga = g.clone();
                for (gv, &xv) in ga.data.iter_mut().zip(&va.data) {
                    *gv *= sigmoid(xv);
                }
                self.accumulate(a, &ga);
            }
            &Op::SigmoidHalf(a) => {
                let va = &self.nodes[a].value;
                let mut ga = g.clone();
                for (gv, &xv) in ga.data.iter_mut().zip(&va.data) {
                    let s = sigmoid(xv);
                    *gv *= 0.5 * s * (1.0 - s);
                }
                self.accumulate(a, &ga);
            }
            &Op::SumSq(a) => {
                let va = &self.nodes[a].value;
                let scale = 2.0 * g.data[0];
                let mut ga = va.clone();
                for v in ga.data.iter_mut() {
                    *v *= scale;
                }
                self.accumulate(a, &ga);
            }
            Op::CeSmoothedMean { logits, targets, eps, probs } => {
                let logits = *logits;
                let eps = *eps;
                let t = targets.clone();
                let vocab = probs.cols;
                let rows = probs.rows as f64;
                let scale = g.data[0] / rows;
                let mut gl = probs.clone();
                for (r, &tv) in t.iter().enumerate() {
                    for c in 0..vocab {
                        let q = if c == tv { 1.0 - eps + eps / vocab as f64 } else { eps / vocab as f64 };
                        *gl.at_mut(r, c) = (gl.at(r, c) - q) * scale;
                    }
                }
                self.accumulate(logits, &gl);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let logits = *logits;
                let t = targets.clone();
                let vl = &self.nodes[logits].value;
                let scale = g.data[0] / t.len() as f64;
                let mut gl = RMatrix::zeros(1, t.len());
                for (c, &tv) in t.iter().enumerate() {
                    gl.data[c] = (sigmoid(vl.at(0, c)) - tv) * scale;
                }
                self.accumulate(logits, &gl);
            }
            &Op::L1Complex(a) => {
                let va = &self.nodes[a].value;
                let scale = g.data[0];
                let mut ga = RMatrix::zeros(va.rows, va.cols);
                for (gp, vp) in ga.data.chunks_exact_mut(2).zip(va.data.chunks_exact(2)) {
                    let m = vp[0].hypot(vp[1]);
                    if m > 0.0 {
                        gp[0] = scale * vp[0] / m;
                        gp[1] = scale * vp[1] / m;
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Sdict { x, amp, freq, phase, gate, delta, ridge, .. } => {
                let (x, amp, freq, phase, gate, delta, ridge) =
                    (*x, *amp, *freq, *phase, *gate, *delta, *ridge);
                let grads = {
                    let ctx = match &self.nodes[id].op {
                        Op::Sdict { ctx, .. } => ctx,
                        _ => unreachable!(),
                    };
                    sdict_backward(
                        g,
                        &self.nodes[x].value,
                        &self.nodes[gate].value,
                        self.nodes[delta].value.rows,
                        &self.nodes[amp].value.data,
                        ridge,
                        ctx,
                    )
                };
                self.accumulate(x, &grads.x);
                self.accumulate(amp, &grads.amp);
                self.accumulate(freq, &grads.freq);
                self.accumulate(phase, &grads.phase);
                self.accumulate(gate, &grads.gate);
                self.accumulate(delta, &grads.delta);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, g: &RMatrix) {
        let dst = &mut self.grads[id];
        debug_assert_eq!((dst.rows, dst.cols), (g.rows, g.cols), "grad shape");
        for (d, &s) in dst.data.iter_mut().zip(&g.data) {
            *d += s;
        }
    }

    /// Parameter gradients after `backward`, keyed by ParamId.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &RMatrix)> {
        self.param_nodes
            .iter()
            .map(move |(&pid, &nid)| (pid, &self.grads[nid]))
    }
}

struct SdictGrads {
    x: RMatrix,
    amp: RMatrix,
    freq: RMatrix,
    phase: RMatrix,
    gate: RMatrix,
    delta: RMatrix,
}

fn sdict_backward(
    gy: &RMatrix,
    vx: &RMatrix,
    vgate: &RMatrix,
    delta_rows: usize,
    amps: &[f64],
    ridge: f64,
    ctx: &SdictCtx,
) -> SdictGrads {
    let l = vx.rows;
    let d = vx.cols;
    let k = amps.len();

    // G_Z = 2 dY as a complex matrix with zero imaginary part.
    let mut gz = CMatrix::zeros(l, d);
    for (z, &gv) in gz.data.iter_mut().zip(&gy.data) {
        *z = Complex64::new(2.0 * gv, 0.0);
    }

    // Phi_Delta = Phi .* E.
    let mut phi_mod = ctx.phi.clone();
    for (p, &ev) in phi_mod.data.iter_mut().zip(&ctx.e.data) {
        *p *= ev;
    }

    let g_cgated = phi_mod.conj_t_matmul(&gz); // K x d
    let g_phimod = gz.matmul(&ctx.c_gated.conj_transpose()); // L x K

    // Through the gate.
    let mut g_c = CMatrix::zeros(k, d);
    let mut g_gate = RMatrix::zeros(d, 2 * k);
    for kk in 0..k {
        for j in 0..d {
            let s = Complex64::new(vgate.at(j, 2 * kk), vgate.at(j, 2 * kk + 1));
            let gc = g_cgated.at(kk, j);
            *g_c.at_mut(kk, j) = gc * s.conj();
            let gs = gc * ctx.c.at(kk, j).conj();
            *g_gate.at_mut(j, 2 * kk) += gs.re;
            *g_gate.at_mut(j, 2 * kk + 1) += gs.im;
        }
    }

    // Through the ridged solve, reusing the forward factorization.
    let mut w = g_c.clone();
    ctx.factor.solve_in_place(&mut w);
    // G_G' = -W C^H, then the ridge's trace term folds back onto G.
    let mut g_gram = w.matmul(&ctx.c.conj_transpose());
    for z in g_gram.data.iter_mut() {
        *z = -*z;
    }
    let tr: Complex64 = (0..k).map(|i| g_gram.at(i, i)).fold(Complex64::ZERO, |a, b| a + b);
    let bump = tr.scale(ridge / k as f64);
    for i in 0..k {
        let v = g_gram.at(i, i) + bump;
        *g_gram.at_mut(i, i) = v;
    }

    // G_Phi = X W^H + Phi (G_G + G_G^H) + G_PhiMod .* conj(E).
    let mut g_phi = CMatrix::zeros(l, k);
    for n in 0..l {
        for kk in 0..k {
            let mut acc = Complex64::ZERO;
            for j in 0..d {
                acc += w.at(kk, j).conj().scale(vx.at(n, j));
            }
            *g_phi.at_mut(n, kk) = acc + g_phimod.at(n, kk) * ctx.e.at(n, kk).conj();
        }
    }
    let mut sym = g_gram.clone();
    for a in 0..k {
        for b in 0..k {
            let v = g_gram.at(a, b) + g_gram.at(b, a).conj();
            *sym.at_mut(a, b) = v;
        }
    }
    let phi_sym = ctx.phi.matmul(&sym);
    for (gp, &pv) in g_phi.data.iter_mut().zip(&phi_sym.data) {
        *gp += pv;
    }

    // G_E = G_PhiMod .* conj(Phi); delta grad is -Im(E .* conj(G_E)).
    let mut g_delta = RMatrix::zeros(delta_rows, k);
    for n in 0..l {
        for kk in 0..k {
            let ge = g_phimod.at(n, kk) * ctx.phi.at(n, kk).conj();
            *g_delta.at_mut(n, kk) = -(ctx.e.at(n, kk) * ge.conj()).im;
        }
    }

    // G_X = Re(Phi W).
    let phi_w = ctx.phi.matmul(&w);
    let mut g_x = RMatrix::zeros(l, d);
    for (o, z) in g_x.data.iter_mut().zip(&phi_w.data) {
        *o = z.re;
    }

    // Atom parameters from G_Phi: dPhi = Phi (dA/A + i (2 pi n df + dphi)).
    let mut g_amp = RMatrix::zeros(1, k);
    let mut g_freq = RMatrix::zeros(1, k);
    let mut g_phase = RMatrix::zeros(1, k);
    for kk in 0..k {
        let mut re_sum = 0.0;
        let mut im_sum = 0.0;
        let mut n_im_sum = 0.0;
        for n in 0..l {
            let w = ctx.phi.at(n, kk).conj() * g_phi.at(n, kk);
            // conj(G_Phi) .* Phi = conj of the above; flip the imaginary sign.
            re_sum += w.re;
            im_sum += -w.im;
            n_im_sum += -(n as f64) * w.im;
        }
        g_amp.data[kk] = re_sum / amps[kk];
        g_phase.data[kk] = -im_sum;
        g_freq.data[kk] = -TAU * n_im_sum;
    }

    SdictGrads {
        x: g_x,
        amp: g_amp,
        freq: g_freq,
        phase: g_phase,
        gate: g_gate,
        delta: g_delta,
    }
}

pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
}

/// Central-difference gradient verification.
///
/// Rebuilds the graph through `build` for each probe, comparing the analytic
/// gradient of the scalar output against (f(p+h) - f(p-h)) / 2h on up to
/// `per_tensor` seeded coordinates per parameter. Relative error uses a 1e-4
/// magnitude floor: below it, gradient noise from O(1) losses in f64 would
/// swamp the comparison and the difference is compared absolutely at that
/// scale instead.
pub fn fd_check<F>(
    store: &mut ParamStore,
    mut build: F,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> FdReport
where
    F: FnMut(&ParamStore) -> (Tape, NodeId),
{
    let (mut tape, loss) = build(store);
    tape.backward(loss);
    let mut analytic: HashMap<ParamId, RMatrix> = HashMap::new();
    for (pid, g) in tape.param_grads() {
        analytic.insert(pid, g.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
    };
    for pid in 0..store.len() {
        let numel = store.get(pid).data.len();
        if numel == 0 {
            continue;
        }
        let mut coords: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..numel)).collect()
        };
        coords.sort_unstable();
        coords.dedup();
        for coord in coords {
            let orig = store.get(pid).data[coord];
            store.get_mut(pid).data[coord] = orig + h;
            let (tp, lp) = build(store);
            let f_plus = tp.value(lp).data[0];
            store.get_mut(pid).data[coord] = orig - h;
            let (tm, lm) = build(store);
            let f_minus = tm.value(lm).data[0];
            store.get_mut(pid).data[coord] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.get(&pid).map_or(0.0, |g| g.data[coord]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(pid).to_string();
                report.worst_coord = coord;
            }
        }
    }
    report
}
