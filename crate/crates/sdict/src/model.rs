//! Toy vision-language model built around the spectral-dictionary mixer.
//!
//! Three stages share one parameter store: a vision stream over image
//! patches, a text stream over question tokens, and a fusion stream over
//! [cls; vision; text]. Every block is post-norm: the mixer output is added
//! back to its input and normalized, then a bias-free GELU FFN does the same.
//!
//! Positional tables and phase-bias rows are allocated for twice the
//! configured image side, so a trained checkpoint runs unchanged on inputs
//! with up to 4x as many vision tokens.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::config::ModelConfig;
use crate::dictionary::{init_dft_grid, init_mel, init_union, SpectralDictionary};
use crate::error::{Result, SdictError};
use crate::matrix::RMatrix;

#[derive(Clone, Copy)]
struct BlockIds {
    raw_amp: ParamId,
    raw_freq: ParamId,
    phase: ParamId,
    gate: ParamId,
    delta: ParamId,
    n1_gamma: ParamId,
    n1_beta: ParamId,
    n2_gamma: ParamId,
    n2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_w2: ParamId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    patch_w: ParamId,
    tok_embed: ParamId,
    pos2d: ParamId,
    pos_text: ParamId,
    pos_cap: ParamId,
    tag_cls: ParamId,
    tag_vision: ParamId,
    tag_text: ParamId,
    vis_blocks: Vec<BlockIds>,
    txt_blocks: Vec<BlockIds>,
    fus_blocks: Vec<BlockIds>,
    cap_w1: ParamId,
    cap_w2: ParamId,
    vqa_w1: ParamId,
    vqa_w2: ParamId,
}

/// Per-sample tape handles: task logits plus the per-block regularizer terms.
pub struct ModelOutputs {
    /// caption_len x vocab.
    pub logits_cap: NodeId,
    /// 1 x num_answers.
    pub logits_vqa: NodeId,
    /// One scalar per block: squared distance between block input and mixer
    /// output.
    pub recs: Vec<NodeId>,
    /// One scalar per block: l1 norm of the complex gate.
    pub l1s: Vec<NodeId>,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> RMatrix {
    let mut m = RMatrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    m
}

/// Near-unit gates with jittered magnitude and phase. All-ones gates leave
/// every channel consuming the same atom mixture, a symmetry the task
/// gradient is slow to break on its own.
fn jittered_gate(d: usize, k: usize, rng: &mut ChaCha8Rng) -> RMatrix {
    let mut g = RMatrix::zeros(d, 2 * k);
    for r in 0..d {
        for c in 0..k {
            let mag = 0.8 + 0.4 * rng.gen_range(0.0..1.0f64);
            let theta = rng.gen_range(-0.5f64..0.5);
            *g.at_mut(r, 2 * c) = mag * theta.cos();
            *g.at_mut(r, 2 * c + 1) = mag * theta.sin();
        }
    }
    g
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.dim;
        let k = cfg.atoms;
        let v = cfg.vocab;
        // Capacity grid: twice the configured side in each direction.
        let g_cap = 2 * cfg.image_side / cfg.patch_side;
        let l_vis_cap = g_cap * g_cap;
        let l_fus_cap = 1 + l_vis_cap + cfg.text_len;
        let p2 = cfg.patch_side * cfg.patch_side;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();

        let patch_w = store.register(
            "patch_embed.w",
            uniform(p2, d, 1.0 / (p2 as f64).sqrt(), &mut rng),
        )?;
        // Positional and tag tables start at a scale comparable to the token
        // content. Patch rows enter at O(1), so a 0.02-scale position code
        // would be ~1% of the signal and cell identity would take thousands
        // of steps to surface in the mixed stream.
        let tok_embed = store.register("tok_embed.table", uniform(v, d, 0.1, &mut rng))?;
        let pos2d = store.register("pos2d.table", uniform(l_vis_cap, d, 0.2, &mut rng))?;
        let pos_text =
            store.register("pos_text.table", uniform(cfg.text_len, d, 0.2, &mut rng))?;
        let pos_cap =
            store.register("pos_cap.table", uniform(cfg.caption_len, d, 0.5, &mut rng))?;
        let tag_cls = store.register("tag.cls", uniform(1, d, 0.2, &mut rng))?;
        let tag_vision = store.register("tag.vision", uniform(1, d, 0.2, &mut rng))?;
        let tag_text = store.register("tag.text", uniform(1, d, 0.2, &mut rng))?;

        // Stream dictionaries: vision starts on the DFT grid of the capacity
        // length, text on a mel-spaced layout, fusion on their union.
        let vis_dict = init_dft_grid(k, l_vis_cap, cfg.seed.wrapping_add(101))?;
        let txt_dict = init_mel(k, cfg.seed.wrapping_add(202))?;
        let fus_dict = init_union(&vis_dict, &txt_dict)?;

        let block = |store: &mut ParamStore,
                         rng: &mut ChaCha8Rng,
                         prefix: &str,
                         dict: &SpectralDictionary,
                         delta_rows: usize|
         -> Result<BlockIds> {
            let bk = dict.k();
            let row = |v: &[f64]| RMatrix::from_rows(&[v]);
            Ok(BlockIds {
                raw_amp: store.register(&format!("{prefix}.mixer.raw_amp"), row(&dict.raw_amp))?,
                raw_freq: store
                    .register(&format!("{prefix}.mixer.raw_freq"), row(&dict.raw_freq))?,
                phase: store.register(&format!("{prefix}.mixer.phase"), row(&dict.phase))?,
                gate: store
                    .register(&format!("{prefix}.mixer.gate"), jittered_gate(d, bk, rng))?,
                // A small random synthesis-phase bias keeps the mixer off the
                // exact-reconstruction fixed point at init; the desk-scale
                // dictionaries are complete, so a zero bias would let the
                // reconstruction term park the whole block at the identity.
                delta: store.register(
                    &format!("{prefix}.mixer.delta"),
                    uniform(delta_rows, bk, 0.05, rng),
                )?,
                n1_gamma: store.register(
                    &format!("{prefix}.norm1.gamma"),
                    RMatrix::from_rows(&[&vec![1.0; d]]),
                )?,
                n1_beta: store
                    .register(&format!("{prefix}.norm1.beta"), RMatrix::zeros(1, d))?,
                n2_gamma: store.register(
                    &format!("{prefix}.norm2.gamma"),
                    RMatrix::from_rows(&[&vec![1.0; d]]),
                )?,
                n2_beta: store
                    .register(&format!("{prefix}.norm2.beta"), RMatrix::zeros(1, d))?,
                ffn_w1: store.register(
                    &format!("{prefix}.ffn.w1"),
                    uniform(d, 4 * d, 1.0 / (d as f64).sqrt(), rng),
                )?,
                ffn_w2: store.register(
                    &format!("{prefix}.ffn.w2"),
                    uniform(4 * d, d, 1.0 / (4.0 * d as f64).sqrt(), rng),
                )?,
            })
        };

        let mut vis_blocks = Vec::new();
        for i in 0..cfg.vision_blocks {
            vis_blocks.push(block(&mut store, &mut rng, &format!("vis{i}"), &vis_dict, l_vis_cap)?);
        }
        let mut txt_blocks = Vec::new();
        for i in 0..cfg.text_blocks {
            txt_blocks.push(block(&mut store, &mut rng, &format!("txt{i}"), &txt_dict, cfg.text_len)?);
        }
        let mut fus_blocks = Vec::new();
        for i in 0..cfg.fusion_blocks {
            fus_blocks.push(block(&mut store, &mut rng, &format!("fus{i}"), &fus_dict, l_fus_cap)?);
        }

        let h = 4 * d;
        let cap_w1 = store.register("cap_head.w1", uniform(d, h, 1.0 / (d as f64).sqrt(), &mut rng))?;
        let cap_w2 = store.register("cap_head.w2", uniform(h, v, 1.0 / (h as f64).sqrt(), &mut rng))?;
        let vqa_w1 = store.register("vqa_head.w1", uniform(d, h, 1.0 / (d as f64).sqrt(), &mut rng))?;
        let vqa_w2 = store.register(
            "vqa_head.w2",
            uniform(h, cfg.num_answers, 1.0 / (h as f64).sqrt(), &mut rng),
        )?;

        Ok(Model {
            cfg: cfg.clone(),
            store,
            patch_w,
            tok_embed,
            pos2d,
            pos_text,
            pos_cap,
            tag_cls,
            tag_vision,
            tag_text,
            vis_blocks,
            txt_blocks,
            fus_blocks,
            cap_w1,
            cap_w2,
            vqa_w1,
            vqa_w2,
        })
    }

    /// Mixer, residual, norm, FFN, residual, norm. Also emits the block's
    /// reconstruction and gate-sparsity scalars.
    fn apply_block(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        ids: &BlockIds,
        x: NodeId,
        recs: &mut Vec<NodeId>,
        l1s: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let amp = {
            let raw = tape.param(store, ids.raw_amp);
            tape.softplus(raw)
        };
        let freq = {
            let raw = tape.param(store, ids.raw_freq);
            tape.sigmoid_half(raw)
        };
        let phase = tape.param(store, ids.phase);
        let gate = tape.param(store, ids.gate);
        let delta = tape.param(store, ids.delta);
        let y = tape.sdict(x, amp, freq, phase, gate, delta, self.cfg.ridge)?;
        let diff = tape.sub(x, y);
        recs.push(tape.sum_sq(diff));
        l1s.push(tape.l1_complex(gate));

        let res1 = tape.add(x, y);
        let g1 = tape.param(store, ids.n1_gamma);
        let b1 = tape.param(store, ids.n1_beta);
        let h = tape.layer_norm(res1, g1, b1);

        let w1 = tape.param(store, ids.ffn_w1);
        let w2 = tape.param(store, ids.ffn_w2);
        let mid = tape.matmul(h, w1);
        let act = tape.gelu(mid);
        let f = tape.matmul(act, w2);
        let res2 = tape.add(h, f);
        let g2 = tape.param(store, ids.n2_gamma);
        let b2 = tape.param(store, ids.n2_beta);
        Ok(tape.layer_norm(res2, g2, b2))
    }

    /// Build the forward graph for one (image, question) pair on `tape`.
    ///
    /// The image may be any square multiple of the patch side up to twice the
    /// configured side; more vision tokens use more positional rows without
    /// touching any parameter.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pixels: &RMatrix,
        question_ids: &[usize],
    ) -> Result<ModelOutputs> {
        self.forward_with(&self.store, tape, pixels, question_ids)
    }

    /// `forward` against an external parameter store sharing this model's
    /// layout. Finite-difference checks perturb a store clone and rebuild the
    /// graph through here.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        pixels: &RMatrix,
        question_ids: &[usize],
    ) -> Result<ModelOutputs> {
        let p = self.cfg.patch_side;
        let g_cap = 2 * self.cfg.image_side / p;
        if pixels.rows != pixels.cols || pixels.rows % p != 0 {
            return Err(SdictError::Config(format!(
                "image {}x{} does not tile into {p}px patches",
                pixels.rows, pixels.cols
            )));
        }
        let grid = pixels.rows / p;
        if grid > g_cap {
            return Err(SdictError::Capacity {
                requested: grid * grid,
                available: g_cap * g_cap,
            });
        }
        if question_ids.len() != self.cfg.text_len {
            return Err(SdictError::DimMismatch(format!(
                "question has {} tokens, model expects {}",
                question_ids.len(),
                self.cfg.text_len
            )));
        }
        if question_ids.iter().any(|&t| t >= self.cfg.vocab) {
            return Err(SdictError::Index("question token out of vocabulary".into()));
        }

        let mut recs = Vec::new();
        let mut l1s = Vec::new();

        // Vision stream.
        let (patches, coords) = patchify(pixels, p);
        let pos_idx: Vec<usize> = coords.iter().map(|&(r, c)| r * g_cap + c).collect();
        let xp = tape.input(patches);
        let wp = tape.param(store, self.patch_w);
        let emb = tape.matmul(xp, wp);
        let pos_tab = tape.param(store, self.pos2d);
        let pos = tape.gather_rows(pos_tab, &pos_idx);
        let mut vis = tape.add(emb, pos);
        for ids in &self.vis_blocks {
            vis = self.apply_block(store, tape, ids, vis, &mut recs, &mut l1s)?;
        }

        // Text stream.
        let tok_tab = tape.param(store, self.tok_embed);
        let tok = tape.gather_rows(tok_tab, question_ids);
        let pt_tab = tape.param(store, self.pos_text);
        let pt = tape.slice_rows(pt_tab, 0, self.cfg.text_len);
        let mut txt = tape.add(tok, pt);
        for ids in &self.txt_blocks {
            txt = self.apply_block(store, tape, ids, txt, &mut recs, &mut l1s)?;
        }

        // Fusion: [cls; vision; text] with a modal tag added to every token.
        // The cls token is its own tag on a zero base.
        let cls = tape.param(store, self.tag_cls);
        let tv = tape.param(store, self.tag_vision);
        let tt = tape.param(store, self.tag_text);
        let vis_tagged = tape.add_broadcast_row(vis, tv);
        let txt_tagged = tape.add_broadcast_row(txt, tt);
        let head = tape.concat_rows(cls, vis_tagged);
        let mut fused = tape.concat_rows(head, txt_tagged);
        for ids in &self.fus_blocks {
            fused = self.apply_block(store, tape, ids, fused, &mut recs, &mut l1s)?;
        }
        let h_cls = tape.slice_rows(fused, 0, 1);

        // Caption head: every output position reads cls plus its own
        // positional row; positions decode in parallel.
        let pc_tab = tape.param(store, self.pos_cap);
        let pc = tape.slice_rows(pc_tab, 0, self.cfg.caption_len);
        let hcap = tape.add_broadcast_row(pc, h_cls);
        let cw1 = tape.param(store, self.cap_w1);
        let cw2 = tape.param(store, self.cap_w2);
        let cm = tape.matmul(hcap, cw1);
        let ca = tape.gelu(cm);
        let logits_cap = tape.matmul(ca, cw2);

        let vw1 = tape.param(store, self.vqa_w1);
        let vw2 = tape.param(store, self.vqa_w2);
        let qm = tape.matmul(h_cls, vw1);
        let qa = tape.gelu(qm);
        let logits_vqa = tape.matmul(qa, vw2);

        Ok(ModelOutputs { logits_cap, logits_vqa, recs, l1s })
    }

    /// Rebuild a block's dictionary from the live parameter values.
    /// `prefix` names a block, e.g. "vis0" or "fus1".
    pub fn block_dictionary(&self, prefix: &str) -> Result<SpectralDictionary> {
        let get = |field: &str| -> Result<Vec<f64>> {
            let id = self
                .store
                .id(&format!("{prefix}.mixer.{field}"))
                .ok_or_else(|| SdictError::Config(format!("no block named {prefix}")))?;
            Ok(self.store.get(id).data.clone())
        };
        SpectralDictionary::from_raw(get("raw_amp")?, get("raw_freq")?, get("phase")?)
    }

    pub fn block_prefixes(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.vision_blocks {
            names.push(format!("vis{i}"));
        }
        for i in 0..self.cfg.text_blocks {
            names.push(format!("txt{i}"));
        }
        for i in 0..self.cfg.fusion_blocks {
            names.push(format!("fus{i}"));
        }
        names
    }
}

/// Block prefixes present in a bare parameter store, in declaration order.
/// Lets checkpoint-only tools navigate a model without its config.
pub fn store_block_prefixes(store: &ParamStore) -> Vec<String> {
    store
        .iter()
        .filter_map(|(_, name, _)| name.strip_suffix(".mixer.raw_amp").map(|p| p.to_string()))
        .collect()
}

/// Rebuild one block's dictionary from a bare parameter store.
pub fn store_block_dictionary(store: &ParamStore, prefix: &str) -> Result<SpectralDictionary> {
    let get = |field: &str| -> Result<Vec<f64>> {
        let id = store
            .id(&format!("{prefix}.mixer.{field}"))
            .ok_or_else(|| SdictError::Config(format!("no block named {prefix}")))?;
        Ok(store.get(id).data.clone())
    };
    SpectralDictionary::from_raw(get("raw_amp")?, get("raw_freq")?, get("phase")?)
}

/// Rebuild one block's full mixer (dictionary, gate, phase bias) from a bare
/// parameter store.
pub fn store_block_mixer(
    store: &ParamStore,
    prefix: &str,
    path: crate::mixer::MixerPath,
    ridge: f64,
) -> Result<crate::mixer::SDictMixer> {
    use crate::complex::Complex64;
    use crate::dictionary::PhaseBias;
    use crate::matrix::CMatrix;

    let dict = store_block_dictionary(store, prefix)?;
    let k = dict.k();
    let tensor = |field: &str| -> Result<&RMatrix> {
        let id = store
            .id(&format!("{prefix}.mixer.{field}"))
            .ok_or_else(|| SdictError::Config(format!("{prefix} has no {field}")))?;
        Ok(store.get(id))
    };
    let graw = tensor("gate")?;
    if graw.cols != 2 * k {
        return Err(SdictError::DimMismatch(format!(
            "{prefix} gate has {} columns for {k} atoms",
            graw.cols
        )));
    }
    let mut gate_s = CMatrix::zeros(graw.rows, k);
    for r in 0..graw.rows {
        for c in 0..k {
            *gate_s.at_mut(r, c) = Complex64::new(graw.at(r, 2 * c), graw.at(r, 2 * c + 1));
        }
    }
    let draw = tensor("delta")?;
    let bias = PhaseBias { l_max: draw.rows, k, delta: draw.data.clone() };
    crate::mixer::SDictMixer::new(dict, gate_s, bias, path, ridge)
}

/// Split a square image into non-overlapping p x p patches, row-major both
/// across the grid and within each patch. Returns the patch matrix (one row
/// per patch) and each patch's (row, col) grid coordinate.
pub fn patchify(img: &RMatrix, p: usize) -> (RMatrix, Vec<(usize, usize)>) {
    assert_eq!(img.rows % p, 0);
    assert_eq!(img.cols % p, 0);
    let gr = img.rows / p;
    let gc = img.cols / p;
    let mut patches = RMatrix::zeros(gr * gc, p * p);
    let mut coords = Vec::with_capacity(gr * gc);
    for r in 0..gr {
        for c in 0..gc {
            let row = r * gc + c;
            for y in 0..p {
                for x in 0..p {
                    *patches.at_mut(row, y * p + x) = img.at(r * p + y, c * p + x);
                }
            }
            coords.push((r, c));
        }
    }
    (patches, coords)
}

/// Inverse of `patchify` for a square grid.
pub fn unpatchify(patches: &RMatrix, p: usize, grid: usize) -> RMatrix {
    assert_eq!(patches.rows, grid * grid);
    assert_eq!(patches.cols, p * p);
    let mut img = RMatrix::zeros(grid * p, grid * p);
    for r in 0..grid {
        for c in 0..grid {
            let row = r * grid + c;
            for y in 0..p {
                for x in 0..p {
                    *img.at_mut(r * p + y, c * p + x) = patches.at(row, y * p + x);
                }
            }
        }
    }
    img
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Nucleus sampling: keep the smallest prob-sorted prefix with mass >= p,
/// renormalize, draw. p -> 0 degenerates to argmax; p = 1 samples the full
/// softmax distribution.
pub fn decode_nucleus(logits: &[f64], p: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!(!logits.is_empty());
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable tie-break on the index keeps the draw reproducible.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        kept += 1;
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let u: f64 = rng.gen_range(0.0..1.0) * mass;
    let mut acc = 0.0;
    for &i in &order[..kept] {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    order[kept - 1]
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            atoms: 4,
            vision_blocks: 1,
            text_blocks: 1,
            fusion_blocks: 1,
            patch_side: 8,
            image_side: 16,
            vocab: crate::dataset::vocab_len(),
            text_len: 12,
            caption_len: 8,
            num_answers: crate::dataset::NUM_ANSWERS,
            ridge: 1e-6,
            seed: 3,
        }
    }

    fn rand_img(side: usize, rng: &mut ChaCha8Rng) -> RMatrix {
        let mut m = RMatrix::zeros(side, side);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        m
    }

    #[test]
    fn patchify_roundtrips_and_orders_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_img(12, &mut rng);
        let (patches, coords) = patchify(&img, 4);
        assert_eq!(patches.rows, 9);
        assert_eq!(coords[5], (1, 2));
        // Patch (0,1) first pixel is img[0,4]; within-patch layout row-major.
        assert_eq!(patches.at(1, 0), img.at(0, 4));
        assert_eq!(patches.at(1, 4), img.at(1, 4));
        assert_eq!(unpatchify(&patches, 4, 3), img);
    }

    #[test]
    fn forward_shapes_and_param_count() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg).unwrap();
        let d = cfg.dim;
        let k = cfg.atoms;
        let v = cfg.vocab;
        // Capacity grid is 4x4 (twice a 2x2 desk grid).
        let lv_cap = 16;
        let lf_cap = 1 + lv_cap + cfg.text_len;
        let block = |delta_rows: usize, bk: usize| {
            3 * bk + d * 2 * bk + delta_rows * bk + 4 * d + d * 4 * d + 4 * d * d
        };
        let want = (64 * d)                      // patch embed
            + v * d + lv_cap * d + cfg.text_len * d + cfg.caption_len * d
            + 3 * d                              // tags
            + block(lv_cap, k)
            + block(cfg.text_len, k)
            + block(lf_cap, 2 * k)
            + d * 4 * d + 4 * d * v + d * 4 * d + 4 * d * cfg.num_answers;
        assert_eq!(model.store.num_scalars(), want);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_img(16, &mut rng);
        let q = vec![1usize; 12];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &img, &q).unwrap();
        let lc = tape.value(out.logits_cap);
        assert_eq!((lc.rows, lc.cols), (8, v));
        let lq = tape.value(out.logits_vqa);
        assert_eq!((lq.rows, lq.cols), (1, cfg.num_answers));
        assert_eq!(out.recs.len(), 3);
        assert_eq!(out.l1s.len(), 3);
        assert!(lc.is_finite() && lq.is_finite());
        for &r in &out.recs {
            assert!(tape.value(r).at(0, 0).is_finite());
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = Model::new(&tiny_cfg()).unwrap();
        let mut tape = Tape::new();
        let img = RMatrix::zeros(16, 16);
        // Wrong question length.
        assert!(model.forward(&mut tape, &img, &[0; 5]).is_err());
        // Token outside the vocabulary.
        let mut q = vec![0usize; 12];
        q[3] = 999;
        assert!(model.forward(&mut tape, &img, &q).is_err());
        // Image beyond the 2x capacity.
        let big = RMatrix::zeros(64, 64);
        assert!(model.forward(&mut tape, &big, &vec![0; 12]).is_err());
        // Non-square image.
        let rect = RMatrix::zeros(16, 8);
        assert!(model.forward(&mut tape, &rect, &vec![0; 12]).is_err());
    }

    #[test]
    fn question_order_changes_the_answer_logits() {
        let model = Model::new(&tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_img(16, &mut rng);
        let q1 = vec![26, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let mut q2 = q1.clone();
        q2.swap(0, 1);
        let run = |q: &[usize]| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &img, q).unwrap();
            tape.value(out.logits_vqa).data.clone()
        };
        let a = run(&q1);
        let b = run(&q2);
        assert!(
            a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9),
            "positional encoding should make token order matter"
        );
    }

    #[test]
    fn doubling_the_image_side_reuses_every_parameter() {
        let cfg = tiny_cfg();
        let model = Model::new(&cfg).unwrap();
        let before = model.store.num_scalars();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = vec![27, 10, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];

        // 16px -> 4 vision tokens; 32px -> 16: quadrupled context, same params.
        let small = rand_img(16, &mut rng);
        let large = rand_img(32, &mut rng);
        let mut tape = Tape::new();
        let o1 = model.forward(&mut tape, &small, &q).unwrap();
        assert!(tape.value(o1.logits_cap).is_finite());
        let mut tape = Tape::new();
        let o2 = model.forward(&mut tape, &large, &q).unwrap();
        assert!(tape.value(o2.logits_cap).is_finite());
        assert_eq!(model.store.num_scalars(), before);
    }

    #[test]
    fn random_tiny_configs_keep_finite_outputs() {
        // Robustness sweep: many random small models, random finite inputs,
        // outputs must stay finite.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000u64 {
            let patch = [2usize, 4][rng.gen_range(0..2)];
            let grids = [1usize, 2][rng.gen_range(0..2)];
            // The vision dictionary draws from the capacity grid's DFT bins:
            // (2*grids)^2 tokens leave room for at most half that many atoms.
            let max_atoms = (2 * grids * 2 * grids) / 2;
            let cfg = ModelConfig {
                dim: [2usize, 4, 8][rng.gen_range(0..3)],
                atoms: 2 + rng.gen_range(0..max_atoms - 1),
                vision_blocks: 1 + rng.gen_range(0..2),
                text_blocks: 1,
                fusion_blocks: 1 + rng.gen_range(0..2),
                patch_side: patch,
                image_side: patch * grids,
                vocab: crate::dataset::vocab_len(),
                text_len: 12,
                caption_len: 8,
                num_answers: crate::dataset::NUM_ANSWERS,
                ridge: [1e-8, 1e-4][rng.gen_range(0..2)],
                seed: trial,
            };
            let model = Model::new(&cfg).unwrap();
            let side = cfg.image_side * [1, 2][rng.gen_range(0..2)];
            let mut img = RMatrix::zeros(side, side);
            for v in img.data.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let q: Vec<usize> =
                (0..12).map(|_| rng.gen_range(0..crate::dataset::vocab_len())).collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &img, &q).unwrap();
            assert!(
                tape.value(out.logits_cap).is_finite()
                    && tape.value(out.logits_vqa).is_finite(),
                "trial {trial} produced non-finite logits"
            );
        }
    }

    #[test]
    fn block_dictionary_reflects_store() {
        let model = Model::new(&tiny_cfg()).unwrap();
        let d = model.block_dictionary("vis0").unwrap();
        assert_eq!(d.k(), 4);
        let f = model.block_dictionary("fus0").unwrap();
        assert_eq!(f.k(), 8, "fusion dictionary is the union of both streams");
        assert!(model.block_dictionary("vis9").is_err());
        assert_eq!(model.block_prefixes(), vec!["vis0", "txt0", "fus0"]);
    }

    #[test]
    fn nucleus_decoding_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = vec![0.1, 2.0, -1.0, 1.9];
        // p -> 0 keeps only the top token.
        for _ in 0..20 {
            assert_eq!(decode_nucleus(&logits, 0.0, &mut rng), 1);
        }
        assert_eq!(argmax(&logits), 1);
        // A certain distribution stays certain at any p.
        let hot = vec![-30.0, 50.0, -30.0];
        for p in [0.0, 0.5, 0.9, 1.0] {
            assert_eq!(decode_nucleus(&hot, p, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_truncates_the_tail() {
        // probs 0.5/0.3/0.15/0.05: the 0.9-nucleus is {0,1,2}; token 3 must
        // never appear.
        let logits: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut seen = [0usize; 4];
        for _ in 0..10_000 {
            seen[decode_nucleus(&logits, 0.9, &mut rng)] += 1;
        }
        assert_eq!(seen[3], 0);
        assert!(seen[0] > seen[1] && seen[1] > seen[2]);
    }

    #[test]
    fn nucleus_at_p_one_matches_the_softmax_distribution() {
        // Statistical check: 1e5 draws from a known 3-way distribution, each
        // class within 3 sigma of its binomial expectation.
        let probs = [0.6f64, 0.3, 0.1];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000usize;
        let mut seen = [0usize; 3];
        for _ in 0..n {
            seen[decode_nucleus(&logits, 1.0, &mut rng)] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (seen[i] as f64 - mean).abs();
            assert!(dev < 3.0 * sd, "class {i}: {} vs {mean} (sd {sd})", seen[i]);
        }
    }
}
