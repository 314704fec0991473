use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{AdamParams, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Training run settings, read from TOML. Loss coefficients, expert counts
/// and the rest of the architecture live in the `[model]` table.
///
/// ```toml
/// corpus = "data/corpus.txt"
/// steps = 2000
/// batch_size = 8
/// seq_len = 64
///
/// [model]
/// experts = 8
/// active = 2
/// bles_coef = 0.1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// UTF-8 text file; character-level vocabulary.
    pub corpus: Option<PathBuf>,
    /// Share of corpus characters used for training.
    pub train_ratio: f64,
    pub batch_size: usize,
    /// Tokens per training window (at least 2).
    pub seq_len: usize,
    pub steps: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between validation passes; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Validation batches per evaluation.
    pub eval_batches: usize,
    /// Simulated offload cost model used for evaluation tok/s.
    pub bytes_per_param: f64,
    pub bandwidth: f64,
    pub compute_per_token: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            corpus: None,
            train_ratio: 0.9,
            batch_size: 8,
            seq_len: 64,
            steps: 1000,
            lr: 3e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 50,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            grad_clip: 1.0,
            eval_interval: 0,
            eval_batches: 4,
            bytes_per_param: 2.0,
            bandwidth: 1e8,
            compute_per_token: 1e-3,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.seq_len < 2 {
            return fail("seq_len must be at least 2".into());
        }
        if self.batch_size == 0 || self.eval_batches == 0 {
            return fail("batch_size and eval_batches must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("lr must be non-negative and min_lr_ratio in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.seq_len > self.model.seq_len {
            return fail(format!(
                "training seq_len {} exceeds model seq_len {}",
                self.seq_len, self.model.seq_len
            ));
        }
        if self.model.lb_coef < 0.0 || self.model.bles_coef < 0.0 {
            return fail("loss coefficients must be non-negative".into());
        }
        let mut m = self.model.clone();
        // the vocabulary is replaced by the corpus's
        m.vocab = m.vocab.max(1);
        m.validate()
    }
}
