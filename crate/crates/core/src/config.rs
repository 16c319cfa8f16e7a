//! Training configuration: every hyperparameter, with strict JSON loading
//! (unknown keys rejected, missing keys defaulted, invariants validated).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::graph::AggMode;
use crate::hgcn::CenteringMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Nearest neighbors per hyperedge.
    pub k: usize,
    /// Node buffer capacity `L`; also sizes the attention weights.
    pub buffer_capacity: usize,
    /// Distillation temperature.
    pub t_hat: f64,
    /// Weight of the distillation term.
    pub kd_weight: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub formal_lr: f64,
    pub batch_size: usize,
    /// Formal-phase epochs (warmup epochs come on top).
    pub epochs: usize,
    pub seed: u64,
    /// Instance feature width.
    pub d_p: usize,
    /// Slide embedding width.
    pub d_s: usize,
    /// Hidden width of the graph-construction projection; defaults to
    /// `ceil(d_s / 2)`.
    pub d_h: Option<usize>,
    /// Attention-pool hidden width; defaults to `ceil(d_s / 2)`.
    pub d_a: Option<usize>,
    /// Graph-classifier MLP hidden width; defaults to `d_s`.
    pub d_m: Option<usize>,
    pub classes: usize,
    pub backbone_variant: BackboneVariant,
    pub folds: usize,
    pub leaky_slope: f64,
    pub agg_mode: AggMode,
    pub centering: CenteringMode,
    /// When set, the buffer is seeded with one gradient-free pass over the
    /// training set before the formal phase; otherwise it starts empty.
    pub seed_buffer_from_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 12,
            buffer_capacity: 256,
            t_hat: 1.5,
            kd_weight: 1.0,
            warmup_epochs: 5,
            warmup_lr: 1e-3,
            formal_lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            d_p: 64,
            d_s: 128,
            d_h: None,
            d_a: None,
            d_m: None,
            classes: 4,
            backbone_variant: BackboneVariant::AttentionPool,
            folds: 5,
            leaky_slope: 0.01,
            agg_mode: AggMode::FixedRandom,
            centering: CenteringMode::Global,
            seed_buffer_from_warmup: false,
        }
    }
}

impl TrainConfig {
    pub fn agg_hidden_dim(&self) -> usize {
        self.d_h.unwrap_or(self.d_s.div_ceil(2))
    }

    pub fn attn_dim(&self) -> usize {
        self.d_a.unwrap_or(self.d_s.div_ceil(2))
    }

    pub fn mlp_hidden_dim(&self) -> usize {
        self.d_m.unwrap_or(self.d_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::invalid(
                "buffer_capacity",
                format!("must be >= batch_size ({})", self.batch_size),
            ));
        }
        if !(self.t_hat > 0.0) {
            return Err(Error::invalid("t_hat", "must be positive"));
        }
        if self.kd_weight < 0.0 {
            return Err(Error::invalid("kd_weight", "must be nonnegative"));
        }
        if !(self.warmup_lr > 0.0) {
            return Err(Error::invalid("warmup_lr", "must be positive"));
        }
        if !(self.formal_lr > 0.0) {
            return Err(Error::invalid("formal_lr", "must be positive"));
        }
        if self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::invalid("leaky_slope", "must be in [0, 1)"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "must be at least 2"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds", "must be at least 2"));
        }
        for (key, dim) in [
            ("d_p", self.d_p),
            ("d_s", self.d_s),
            ("d_h", self.agg_hidden_dim()),
            ("d_a", self.attn_dim()),
            ("d_m", self.mlp_hidden_dim()),
        ] {
            if dim < 1 {
                return Err(Error::invalid(key, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
