use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertKind;

/// Architecture and routing hyperparameters of the toy MoE language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// FFN intermediate size of every expert.
    pub inter: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub experts: usize,
    /// Experts activated per token (top-k).
    pub active: usize,
    pub expert_kind: ExpertKind,
    /// Factor rank of weight-decomposed experts.
    pub rank: usize,
    pub temperature: f64,
    pub lb_coef: f64,
    pub bles_coef: f64,
    /// Standard deviation of dense weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hidden = 64;
        Self {
            layers: 2,
            heads: 4,
            hidden,
            inter: 4 * hidden,
            vocab: 256,
            seq_len: 128,
            experts: 8,
            active: 2,
            expert_kind: ExpertKind::Dense,
            rank: hidden / 2,
            temperature: crate::routing::DEFAULT_TEMPERATURE,
            lb_coef: 0.01,
            bles_coef: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Sets `hidden` and re-derives `inter = 4·hidden` and `rank = hidden/2`.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self.inter = 4 * hidden;
        self.rank = (hidden / 2).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.inter == 0 || self.vocab == 0 {
            return fail("layers, hidden, inter and vocab must be positive".into());
        }
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.experts == 0 || self.active == 0 || self.active > self.experts {
            return fail(format!(
                "active experts {} must be in 1..={}",
                self.active, self.experts
            ));
        }
        if self.expert_kind == ExpertKind::Wd
            && (self.rank == 0 || self.rank > self.hidden.min(self.inter))
        {
            return fail(format!(
                "rank {} must be in 1..={}",
                self.rank,
                self.hidden.min(self.inter)
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.lb_coef < 0.0 || self.bles_coef < 0.0 {
            return fail("loss coefficients must be non-negative".into());
        }
        Ok(())
    }
}
