//! Training loop for the toy vision-language model: composite loss, AdamW
//! with warmup+cosine schedule, JSONL metrics, periodic checkpoints.
//!
//! Everything is seeded; a config run twice produces byte-identical metrics
//! and checkpoints. A non-finite parameter, gradient, or loss aborts the run
//! with an error naming the first offending tensor.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{self, Example};
use crate::error::{Result, SdictError};
use crate::matrix::RMatrix;
use crate::model::{argmax, Model};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

/// Batch gradients, one slot per parameter in declaration order.
pub struct GradBuffer {
    slots: Vec<RMatrix>,
    pos: HashMap<ParamId, usize>,
    ids: Vec<ParamId>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> GradBuffer {
        let mut slots = Vec::with_capacity(store.len());
        let mut pos = HashMap::new();
        let mut ids = Vec::with_capacity(store.len());
        for (i, (id, _, t)) in store.iter().enumerate() {
            slots.push(RMatrix::zeros(t.rows, t.cols));
            pos.insert(id, i);
            ids.push(id);
        }
        GradBuffer { slots, pos, ids }
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut() {
            s.data.fill(0.0);
        }
    }

    /// Add this tape's parameter gradients into the buffer.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (pid, g) in tape.param_grads() {
            let slot = &mut self.slots[self.pos[&pid]];
            debug_assert_eq!((slot.rows, slot.cols), (g.rows, g.cols));
            for (a, &b) in slot.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }

    pub fn slot(&self, i: usize) -> &RMatrix {
        &self.slots[i]
    }

    pub fn first_non_finite(&self, store: &ParamStore) -> Option<String> {
        for ((_, name, _), slot) in store.iter().zip(&self.slots) {
            if !slot.is_finite() {
                return Some(format!("grad({name})"));
            }
        }
        None
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().map(|s| s.frob_norm_sq()).sum::<f64>().sqrt()
    }

    /// Scale the whole buffer so its global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm {
            let s = max_norm / n;
            for slot in self.slots.iter_mut() {
                for v in slot.data.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
}

/// AdamW with bias correction and decoupled weight decay on every parameter.
pub struct AdamW {
    m: Vec<RMatrix>,
    v: Vec<RMatrix>,
    t: u64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        let zeros: Vec<RMatrix> =
            store.iter().map(|(_, _, t)| RMatrix::zeros(t.rows, t.cols)).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0, weight_decay }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, &id) in grads.ids.iter().enumerate() {
            let g = &grads.slots[i];
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = ADAM_BETA1 * m.data[j] + (1.0 - ADAM_BETA1) * gj;
                v.data[j] = ADAM_BETA2 * v.data[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -=
                    lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// Linear warmup to the peak, then a half-cosine back to zero.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    if warmup_steps > 0 && step <= warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub loss_caption: f64,
    pub loss_vqa: f64,
    pub loss_rec: f64,
    pub loss_l1: f64,
    /// Weighted sum actually differentiated.
    pub loss_total: f64,
    /// Caption token accuracy on this batch, PAD positions excluded.
    pub batch_caption_acc: f64,
}

/// One forward/backward pass over a batch. Gradients land in `grads`
/// (zeroed first); loss components come back batch-averaged.
pub fn train_step(
    model: &Model,
    batch: &[&Example],
    lambda_rec: f64,
    lambda_l1: f64,
    smoothing: f64,
    grads: &mut GradBuffer,
) -> Result<StepStats> {
    assert!(!batch.is_empty());
    if let Some(name) = first_non_finite_param(&model.store) {
        return Err(SdictError::NonFinite(name));
    }
    grads.zero();
    let inv_b = 1.0 / batch.len() as f64;
    let mut stats = StepStats::default();
    let mut hits = 0usize;
    let mut tokens = 0usize;
    for ex in batch {
        let mut tape = Tape::new();
        let parts =
            sample_loss_with(model, &model.store, &mut tape, ex, lambda_rec, lambda_l1, smoothing)?;
        let SampleLoss { out, ce, bce, rec, l1, total } = parts;
        let shard = tape.scale(total, inv_b);
        tape.backward(shard);
        grads.accumulate(&tape);

        stats.loss_caption += tape.value(ce).at(0, 0) * inv_b;
        stats.loss_vqa += tape.value(bce).at(0, 0) * inv_b;
        stats.loss_rec += tape.value(rec).at(0, 0) * inv_b;
        stats.loss_l1 += tape.value(l1).at(0, 0) * inv_b;
        stats.loss_total += tape.value(total).at(0, 0) * inv_b;

        let logits = tape.value(out.logits_cap);
        for (t, &target) in ex.caption_ids.iter().enumerate() {
            if target == dataset::PAD {
                continue;
            }
            tokens += 1;
            if argmax(logits.row(t)) == target {
                hits += 1;
            }
        }
    }
    if !stats.loss_total.is_finite() {
        return Err(SdictError::NonFinite("loss".into()));
    }
    if let Some(name) = grads.first_non_finite(&model.store) {
        return Err(SdictError::NonFinite(name));
    }
    stats.batch_caption_acc = if tokens == 0 { 1.0 } else { hits as f64 / tokens as f64 };
    Ok(stats)
}

fn sum_nodes(tape: &mut Tape, nodes: &[crate::autograd::NodeId]) -> crate::autograd::NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

/// Scalar nodes of one sample's composite loss, all on the same tape.
pub struct SampleLoss {
    pub out: crate::model::ModelOutputs,
    pub ce: crate::autograd::NodeId,
    pub bce: crate::autograd::NodeId,
    pub rec: crate::autograd::NodeId,
    pub l1: crate::autograd::NodeId,
    pub total: crate::autograd::NodeId,
}

/// Composite loss for one example: smoothed caption CE + answer BCE +
/// lambda_rec * per-layer reconstruction + lambda_l1 * gate sparsity.
/// Takes the parameter store explicitly so gradient checks can rebuild the
/// graph against a perturbed copy.
pub fn sample_loss_with(
    model: &Model,
    store: &ParamStore,
    tape: &mut Tape,
    ex: &Example,
    lambda_rec: f64,
    lambda_l1: f64,
    smoothing: f64,
) -> Result<SampleLoss> {
    let out = model.forward_with(store, tape, &ex.pixels, &ex.question_ids)?;
    let ce = tape.ce_smoothed_mean(out.logits_cap, &ex.caption_ids, smoothing);
    let mut hot = vec![0.0; model.cfg.num_answers];
    hot[ex.answer_id] = 1.0;
    let bce = tape.bce_with_logits_mean(out.logits_vqa, &hot);
    let rec = sum_nodes(tape, &out.recs);
    let l1 = sum_nodes(tape, &out.l1s);
    let task = tape.add(ce, bce);
    let rec_w = tape.scale(rec, lambda_rec);
    let l1_w = tape.scale(l1, lambda_l1);
    let reg = tape.add(rec_w, l1_w);
    let total = tape.add(task, reg);
    Ok(SampleLoss { out, ce, bce, rec, l1, total })
}

fn first_non_finite_param(store: &ParamStore) -> Option<String> {
    for (_, name, t) in store.iter() {
        if !t.is_finite() {
            return Some(name.to_string());
        }
    }
    None
}

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    /// Exact-match token accuracy over non-PAD caption positions.
    pub caption_acc: f64,
    pub vqa_acc: f64,
    pub caption_tokens: usize,
    pub samples: usize,
}

/// Greedy decoding on both heads; PAD caption positions leave the
/// denominator untouched.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<EvalReport> {
    assert!(!examples.is_empty());
    let mut tok_hits = 0usize;
    let mut tokens = 0usize;
    let mut vqa_hits = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ex.pixels, &ex.question_ids)?;
        let logits = tape.value(out.logits_cap);
        for (t, &target) in ex.caption_ids.iter().enumerate() {
            if target == dataset::PAD {
                continue;
            }
            tokens += 1;
            if argmax(logits.row(t)) == target {
                tok_hits += 1;
            }
        }
        if argmax(tape.value(out.logits_vqa).row(0)) == ex.answer_id {
            vqa_hits += 1;
        }
    }
    Ok(EvalReport {
        caption_acc: if tokens == 0 { 1.0 } else { tok_hits as f64 / tokens as f64 },
        vqa_acc: vqa_hits as f64 / examples.len() as f64,
        caption_tokens: tokens,
        samples: examples.len(),
    })
}

/// Total l1 mass of every block's complex gate.
pub fn gate_l1_total(model: &Model) -> f64 {
    let mut sum = 0.0;
    for prefix in model.block_prefixes() {
        let id = model.store.id(&format!("{prefix}.mixer.gate")).unwrap();
        let g = model.store.get(id);
        for r in 0..g.rows {
            for k in 0..g.cols / 2 {
                sum += g.at(r, 2 * k).hypot(g.at(r, 2 * k + 1));
            }
        }
    }
    sum
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub early_stopped: bool,
    pub final_eval: EvalReport,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Run the full loop: build data and model, iterate optimizer steps, write
/// one JSONL metrics row per step, checkpoint periodically, stop early once
/// both held-out accuracy targets are met.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = &cfg.model;
    if m.vocab < dataset::vocab_len()
        || m.num_answers != dataset::NUM_ANSWERS
        || m.caption_len != dataset::CAPTION_LEN
        || m.text_len != dataset::TEXT_LEN
    {
        return Err(SdictError::Config(
            "model dimensions do not cover the synthetic grammar".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let all = dataset::gen_dataset(
        cfg.data_seed,
        cfg.train_examples + cfg.eval_examples,
        m.image_side,
    );
    dataset::write_cache(&out_dir.join("dataset.sds1"), &all)?;
    let (train_set, eval_set) = all.split_at(cfg.train_examples);

    let mut model = Model::new(m)?;
    let mut adam = AdamW::new(&model.store, cfg.weight_decay);
    let mut grads = GradBuffer::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ 0x9E37_79B9_7F4A_7C15);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let checkpoint_path = out_dir.join("model.sdv1");
    checkpoint::save(&checkpoint_path, &model.store)?;

    let mut early_stopped = false;
    let mut steps_run = 0usize;
    for step in 0..cfg.steps {
        let lambda_rec = cfg.loss.lambda_rec_at(step, cfg.steps);
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &train_set[rng.gen_range(0..train_set.len())])
            .collect();
        let stats = train_step(
            &model,
            &batch,
            lambda_rec,
            cfg.loss.lambda_l1,
            cfg.label_smoothing,
            &mut grads,
        )?;
        grads.clip_global_norm(cfg.grad_clip);
        let lr = lr_at(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr);
        adam.step(&mut model.store, &grads, lr);
        steps_run = step + 1;

        let row = serde_json::json!({
            "step": step,
            "lr": lr,
            "loss_caption": stats.loss_caption,
            "loss_vqa": stats.loss_vqa,
            "loss_rec": stats.loss_rec,
            "loss_l1": stats.loss_l1,
            "acc": stats.batch_caption_acc,
        });
        writeln!(metrics, "{row}")?;

        if cfg.checkpoint_every > 0 && steps_run % cfg.checkpoint_every == 0 {
            checkpoint::save(&out_dir.join(format!("ckpt_{steps_run}.sdv1")), &model.store)?;
        }
        if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 {
            let report = evaluate(&model, eval_set)?;
            if report.caption_acc >= cfg.caption_acc_target
                && report.vqa_acc >= cfg.vqa_acc_target
            {
                early_stopped = true;
                break;
            }
        }
    }
    metrics.flush()?;
    checkpoint::save(&checkpoint_path, &model.store)?;

    let final_eval = evaluate(&model, eval_set)?;
    let summary = serde_json::json!({
        "steps_run": steps_run,
        "early_stopped": early_stopped,
        "caption_acc": final_eval.caption_acc,
        "vqa_acc": final_eval.vqa_acc,
        "gate_l1_total": gate_l1_total(&model),
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;

    Ok(TrainOutcome { steps_run, early_stopped, final_eval, metrics_path, checkpoint_path })
}
