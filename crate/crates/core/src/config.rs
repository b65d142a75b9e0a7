//! Run configuration: every hyperparameter of both training stages plus
//! evaluation defaults. Loaded from JSON; missing fields take the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Protocol, Side};
use crate::gnn::GnnKind;
use crate::scoring::{CorruptionMode, ScoreFnSpec};
use crate::text::TextEncoderSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    /// Entity/relation vector width `d`.
    pub dim: usize,
    pub text: TextEncoderSpec,
    /// Separate head and tail reductions instead of one shared map.
    pub separate_head_tail_mlp: bool,
    /// Stage-2 score function. Stage 1 always scores with TransE using `score.p_norm`.
    pub score: ScoreFnSpec,
    pub gnn: GnnConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub optimizer: OptimizerConfig,
    pub corruption: CorruptionMode,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub variant: GnnKind,
    pub depth: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    /// Start every GNN weight at zero (the stack then passes features through).
    pub zero_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub warmup_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Stage-1 text features.
    Text,
    /// Free, randomly initialized entity vectors (graph-only and plain TransE baselines).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: u64,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub freeze_text: bool,
    pub features: FeatureSource,
    pub early_stopping: bool,
    pub eval_every: u64,
    pub patience: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub side: Side,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            dim: 400,
            text: TextEncoderSpec::default(),
            separate_head_tail_mlp: false,
            score: ScoreFnSpec::default(),
            gnn: GnnConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            optimizer: OptimizerConfig::default(),
            corruption: CorruptionMode::Both,
            eval: EvalConfig::default(),
        }
    }
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            variant: GnnKind::Gat,
            depth: 2,
            heads: 1,
            leaky_slope: 0.2,
            zero_init: false,
        }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 5e-5,
            epochs: 6,
            batch_size: 64,
            margin: 1.0,
            negatives_per_positive: 1,
            warmup_fraction: 0.1,
        }
    }
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 0.01,
            epochs: 4000,
            margin: 1.0,
            negatives_per_positive: 1,
            freeze_text: true,
            features: FeatureSource::Text,
            early_stopping: false,
            eval_every: 50,
            patience: 10,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Both,
            side: Side::Both,
            k: 10,
        }
    }
}

impl ModelConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        self.text.validate(self.dim)?;
        self.score.validate()?;
        if self.gnn.variant != GnnKind::None && !(1..=4).contains(&self.gnn.depth) {
            return bad(format!("gnn depth must be 1..=4, got {}", self.gnn.depth));
        }
        if self.gnn.heads == 0 {
            return bad("gnn heads must be at least 1".into());
        }
        for (name, lr) in [("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, m) in [("stage1.margin", self.stage1.margin), ("stage2.margin", self.stage2.margin)] {
            if !(m > 0.0 && m.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.stage1.batch_size == 0 {
            return bad("stage1.batch_size must be positive".into());
        }
        if self.stage1.negatives_per_positive == 0 || self.stage2.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.stage1.warmup_fraction) {
            return bad("stage1.warmup_fraction must lie in [0, 1]".into());
        }
        if self.stage2.early_stopping && (self.stage2.eval_every == 0 || self.stage2.patience == 0) {
            return bad("early stopping needs positive eval_every and patience".into());
        }
        if self.eval.k == 0 {
            return bad("eval.k must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.dim, 400);
        assert_eq!((c.stage1.lr, c.stage1.batch_size, c.stage1.epochs), (5e-5, 64, 6));
        assert_eq!(c.stage1.warmup_fraction, 0.1);
        assert_eq!((c.stage2.lr, c.stage2.epochs), (0.01, 4000));
        assert_eq!(c.optimizer.kind, OptimizerKind::Adam);
        assert!(c.stage2.freeze_text);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"dim": 16, "gnn": {"variant": "rgcn"}}"#).unwrap();
        assert_eq!(c.dim, 16);
        assert_eq!(c.gnn.variant, GnnKind::Rgcn);
        assert_eq!(c.gnn.depth, 2);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"dimm": 16}"#).is_err());
        let c = ModelConfig {
            dim: 8192,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
