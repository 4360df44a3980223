//! Model, optimizer and training configuration, read from TOML.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MoleError, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tfm,
    Moe,
    Mole,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Tfm => "tfm",
            ModelKind::Moe => "moe",
            ModelKind::Mole => "mole",
        })
    }
}

impl FromStr for ModelKind {
    type Err = MoleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tfm" => Ok(ModelKind::Tfm),
            "moe" => Ok(ModelKind::Moe),
            "mole" => Ok(ModelKind::Mole),
            _ => Err(MoleError::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate applied at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Dev-set evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 8,
            eval_every: 0,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_blocks: usize,
    /// 1-based encoder blocks followed by an expert layer.
    pub expert_positions: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub gate_hidden: usize,
    pub num_languages: usize,
    /// Experts per frame for the MoE kind.
    pub k: usize,
    pub use_lrl: bool,
    pub use_lae: bool,
    pub use_calibration: bool,
    /// Route language-representation gradients into the gate only.
    pub lrl_stop_gradient: bool,
    pub lambda_lrl: f64,
    pub lambda_balance: f64,
    /// Input feature dimension; 0 means "take it from the corpus".
    pub feature_dim: usize,
    /// Output classes including blank; 0 means "take it from the corpus".
    pub vocab_size: usize,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        ModelConfig {
            kind: ModelKind::Mole,
            num_blocks: 6,
            expert_positions: vec![4, 6],
            d_model: 32,
            heads: 2,
            d_ff: 64,
            gate_hidden: 16,
            num_languages: 5,
            k: 1,
            use_lrl: true,
            use_lae: true,
            use_calibration: true,
            lrl_stop_gradient: false,
            lambda_lrl: w.lrl,
            lambda_balance: w.balance,
            feature_dim: 0,
            vocab_size: 0,
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| MoleError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Plain transformer variant of this configuration.
    pub fn as_tfm(&self) -> Self {
        ModelConfig {
            kind: ModelKind::Tfm,
            expert_positions: Vec::new(),
            use_lrl: false,
            use_lae: false,
            use_calibration: false,
            ..self.clone()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lrl: if self.use_lrl { self.lambda_lrl } else { 0.0 },
            balance: if self.kind == ModelKind::Moe {
                self.lambda_balance
            } else {
                0.0
            },
        }
    }

    /// Copy with corpus-derived dimensions filled in where unset.
    pub fn resolved(
        &self,
        feature_dim: usize,
        vocab_size: usize,
        num_languages: usize,
    ) -> Result<Self> {
        let mut c = self.clone();
        for (field, have, want) in [
            ("feature_dim", &mut c.feature_dim, feature_dim),
            ("vocab_size", &mut c.vocab_size, vocab_size),
        ] {
            if *have == 0 {
                *have = want;
            } else if *have != want {
                return Err(MoleError::Config(format!(
                    "{field} is {have} but the corpus needs {want}"
                )));
            }
        }
        if c.kind == ModelKind::Mole && c.num_languages != num_languages {
            return Err(MoleError::Config(format!(
                "MoLE needs one expert per language: config has {}, corpus has {num_languages}",
                c.num_languages
            )));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MoleError::Config(m));
        if self.num_blocks == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return err("num_blocks, d_model, d_ff and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        let mut sorted = self.expert_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.expert_positions.len() {
            return err("expert_positions has duplicates".into());
        }
        if let Some(&p) = self
            .expert_positions
            .iter()
            .find(|&&p| p == 0 || p > self.num_blocks)
        {
            return err(format!(
                "expert position {p} outside 1..={}",
                self.num_blocks
            ));
        }
        match self.kind {
            ModelKind::Tfm => {
                if !self.expert_positions.is_empty()
                    || self.use_lrl
                    || self.use_lae
                    || self.use_calibration
                {
                    return err("a tfm model takes no expert positions or expert flags".into());
                }
            }
            ModelKind::Moe | ModelKind::Mole => {
                if self.expert_positions.is_empty() {
                    return err(format!("{} needs at least one expert position", self.kind));
                }
                if self.num_languages == 0 || self.gate_hidden == 0 {
                    return err("num_languages and gate_hidden must be positive".into());
                }
            }
        }
        if self.kind == ModelKind::Moe {
            if self.k == 0 || self.k > self.num_languages {
                return err(format!("k={} outside 1..={}", self.k, self.num_languages));
            }
            if self.use_lrl || self.use_calibration {
                return err("moe takes no LRL or calibration flags".into());
            }
        }
        if self.kind == ModelKind::Mole && self.use_calibration && !self.use_lae {
            return err("calibration weights the language-agnostic expert; enable use_lae".into());
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return err("dropout must be in [0, 1)".into());
        }
        if self.train.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return err("learning rate must be positive".into());
        }
        Ok(())
    }
}
