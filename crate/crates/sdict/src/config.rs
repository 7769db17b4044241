//! JSON-backed run configuration with strict unknown-key rejection: a typoed
//! hyperparameter name is an error, not a silent default.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdictError};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width d.
    pub dim: usize,
    /// Atoms per dictionary (fusion layers own 2x via the union init).
    pub atoms: usize,
    pub vision_blocks: usize,
    pub text_blocks: usize,
    pub fusion_blocks: usize,
    /// Patch side p; the image is cut into (image_side/p)^2 patches.
    pub patch_side: usize,
    pub image_side: usize,
    pub vocab: usize,
    /// Question length in tokens.
    pub text_len: usize,
    pub caption_len: usize,
    pub num_answers: usize,
    /// Trace-scaled ridge for the analysis solve. The fusion dictionary is a
    /// union and can hold more atoms than the fused sequence has positions;
    /// its Gram matrix is then singular, and a loose ridge keeps the backward
    /// solve from amplifying null-space gradient noise by 1/ridge.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            atoms: 16,
            vision_blocks: 2,
            text_blocks: 2,
            fusion_blocks: 2,
            patch_side: 8,
            image_side: 32,
            vocab: crate::dataset::vocab_len(),
            text_len: 12,
            caption_len: 8,
            num_answers: crate::dataset::NUM_ANSWERS,
            ridge: 1e-3,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn vision_tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    /// [CLS] + vision + text.
    pub fn fused_len(&self) -> usize {
        1 + self.vision_tokens() + self.text_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(SdictError::Config(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.dim % 2 != 0 || self.dim == 0 {
            return Err(SdictError::Config(format!(
                "dim must be a positive even number, got {}",
                self.dim
            )));
        }
        let ones = [
            ("atoms", self.atoms),
            ("vision_blocks", self.vision_blocks),
            ("text_blocks", self.text_blocks),
            ("fusion_blocks", self.fusion_blocks),
            ("vocab", self.vocab),
            ("text_len", self.text_len),
            ("caption_len", self.caption_len),
            ("num_answers", self.num_answers),
        ];
        for (name, v) in ones {
            if v == 0 {
                return Err(SdictError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(SdictError::Config("ridge must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Anneal {
    None,
    Linear { start: f64, end: f64, frac: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Reconstruction weight when `anneal` is None.
    pub lambda_rec: f64,
    pub lambda_l1: f64,
    pub anneal: Anneal,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1e-4,
            // Adam normalizes per-coordinate gradient scale, so an l1 weight
            // acts as near-constant-rate shrinkage on the gates regardless of
            // magnitude. 1e-5 keeps sparsity pressure real without draining
            // the gates within a few thousand steps; it also keeps the
            // reconstruction term from parking every mixer at the identity,
            // which the complete desk-scale dictionaries can reach exactly.
            lambda_l1: 1e-5,
            // Shipped default: start strong, relax, never switch off.
            anneal: Anneal::Linear { start: 1e-3, end: 1e-4, frac: 0.2 },
        }
    }
}

impl LossWeights {
    /// Reconstruction weight at `step` of `total_steps`. Annealed values land
    /// on `end` and stay there; they never reach zero unless `end` is zero,
    /// which `validate` rejects.
    pub fn lambda_rec_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.anneal {
            Anneal::None => self.lambda_rec,
            Anneal::Linear { start, end, frac } => {
                let span = (total_steps as f64 * frac).max(1.0);
                let t = (step as f64 / span).min(1.0);
                start + (end - start) * t
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(SdictError::Config(format!("{name} must be finite and >= 0")))
            }
        };
        positive("lambda_rec", self.lambda_rec)?;
        positive("lambda_l1", self.lambda_l1)?;
        if let Anneal::Linear { start, end, frac } = self.anneal {
            positive("anneal.start", start)?;
            positive("anneal.frac", frac)?;
            if !(end > 0.0 && end.is_finite()) {
                return Err(SdictError::Config(
                    "anneal.end must stay above zero: the reconstruction term is never switched off"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Global-norm gradient clip applied to the batch gradient before the
    /// optimizer step.
    pub grad_clip: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Stop early once both held-out targets are met.
    pub caption_acc_target: f64,
    pub vqa_acc_target: f64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            steps: 5000,
            batch_size: 32,
            peak_lr: 3e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            grad_clip: 1.0,
            train_examples: 512,
            eval_examples: 128,
            eval_every: 50,
            checkpoint_every: 500,
            caption_acc_target: 0.92,
            vqa_acc_target: 0.87,
            data_seed: 4711,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.train_examples == 0 || self.eval_examples == 0 {
            return Err(SdictError::Config("batch/dataset sizes must be >= 1".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(SdictError::Config("eval_every/checkpoint_every must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(SdictError::Config("peak_lr must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(SdictError::Config("label_smoothing must be in [0, 0.5)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SdictError::Config("weight_decay must be finite and >= 0".into()));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(SdictError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub atoms: usize,
    pub reps: usize,
    pub warmups: usize,
    /// Attention refuses to materialize a score matrix above this budget and
    /// the record is marked OOM instead.
    pub score_budget_mb: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096, 8192, 16384],
            dim: 64,
            atoms: 32,
            reps: 5,
            warmups: 2,
            score_budget_mb: 256,
            threads: 1,
            seed: 99,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(SdictError::Config("lengths must be non-empty".into()));
        }
        for &l in &self.lengths {
            if !l.is_power_of_two() {
                return Err(SdictError::Config(format!(
                    "bench length {l} is not a power of two"
                )));
            }
        }
        if !self.lengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(SdictError::Config("lengths must be strictly ascending".into()));
        }
        if self.reps < 5 {
            return Err(SdictError::Config("reps must be >= 5 for a stable median".into()));
        }
        if self.dim == 0 || self.atoms == 0 || self.threads == 0 {
            return Err(SdictError::Config("dim/atoms/threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parse a JSON config file of type T, rejecting unknown keys with a
/// line-precise message.
pub fn load<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| SdictError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let t = TrainConfig::default();
        t.validate().unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);

        let b = BenchConfig::default();
        b.validate().unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: BenchConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"peak_lr": 0.001, "peak_lrr": 1}"#);
        assert!(err.is_err(), "typo must not parse");
        let err = serde_json::from_str::<ModelConfig>(r#"{"dim": 64, "dims": 64}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let t: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(t.steps, 7);
        assert_eq!(t.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut m = ModelConfig::default();
        m.image_side = 33;
        assert!(m.validate().is_err());
        m = ModelConfig::default();
        m.dim = 63;
        assert!(m.validate().is_err());

        let mut w = LossWeights::default();
        w.anneal = Anneal::Linear { start: 1e-3, end: 0.0, frac: 0.2 };
        assert!(w.validate().is_err(), "anneal must not reach zero");

        let mut b = BenchConfig::default();
        b.lengths = vec![512, 700];
        assert!(b.validate().is_err(), "non-power-of-two length");
    }

    #[test]
    fn lambda_rec_anneals_linearly_and_never_below_end() {
        let w = LossWeights::default();
        let total = 1000;
        assert!((w.lambda_rec_at(0, total) - 1e-3).abs() < 1e-15);
        // Midpoint of the 20% window.
        let mid = w.lambda_rec_at(100, total);
        assert!((mid - 5.5e-4).abs() < 1e-12, "{mid}");
        assert!((w.lambda_rec_at(200, total) - 1e-4).abs() < 1e-15);
        for step in [200, 500, 1000, 10_000] {
            assert!(w.lambda_rec_at(step, total) >= 1e-4 - 1e-18);
        }
    }
}
