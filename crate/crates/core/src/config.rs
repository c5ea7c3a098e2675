//! The experiment configuration document: one JSON file with optional
//! `backbone`, `train`, `data`, and `eval` sections, each falling back to
//! desk-scale defaults. Unknown keys are rejected rather than ignored so a
//! misspelled hyperparameter cannot silently run the default. Also defines
//! the five ablation modes as loss-weight rewrites of a base TrainConfig.

use std::fmt;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SynthSpec;
use crate::error::{CoreError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of identities whose images form the training split; the
    /// rest become the query/gallery pair.
    pub train_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { train_frac: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(CoreError::Config(format!(
                "train_frac must lie strictly between 0 and 1, got {}",
                self.train_frac
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CoreError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The canonical echo: fixed key order, pretty-printed, trailing
    /// newline. Parsing the echo reproduces the struct and re-echoing is a
    /// fixed point.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate_geometry()?;
        self.train.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        if self.data.image_h != self.backbone.image_h
            || self.data.image_w != self.backbone.image_w
            || self.data.channels != self.backbone.channels
        {
            return Err(CoreError::Config(format!(
                "data images are {}x{}x{} but the backbone expects {}x{}x{}",
                self.data.channels,
                self.data.image_h,
                self.data.image_w,
                self.backbone.channels,
                self.backbone.image_h,
                self.backbone.image_w
            )));
        }
        Ok(())
    }

    /// The backbone with its classifier sized for a training split of
    /// `num_train_ids` identities. An explicit `num_classes` is kept but
    /// must cover the split.
    pub fn backbone_for(&self, num_train_ids: usize) -> Result<BackboneConfig> {
        if num_train_ids == 0 {
            return Err(CoreError::Config("training split has no identities".into()));
        }
        let mut bb = self.backbone.clone();
        if bb.num_classes == 0 {
            bb.num_classes = num_train_ids;
        } else if bb.num_classes < num_train_ids {
            return Err(CoreError::Config(format!(
                "num_classes {} cannot hold {num_train_ids} training identities",
                bb.num_classes
            )));
        }
        bb.validate()?;
        Ok(bb)
    }
}

/// The five experiment rows: which loss terms and which teacher machinery a
/// run enables. Applying a mode rewrites the loss weights of a base config;
/// `Full` leaves it untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Instance terms only, no teacher maintained.
    Baseline,
    /// Teacher updated every step but its distillation loss disabled.
    Ema,
    /// Distillation on, fusion off.
    Intrax,
    /// Fusion on, distillation and teacher off.
    Interx,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::Ema,
        Ablation::Intrax,
        Ablation::Interx,
        Ablation::Full,
    ];

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::Baseline => {
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
                cfg.ema_enabled = false;
            }
            Ablation::Ema => {
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
                cfg.ema_enabled = true;
            }
            Ablation::Intrax => {
                cfg.lambda2 = 0.0;
            }
            Ablation::Interx => {
                cfg.lambda1 = 0.0;
                cfg.ema_enabled = false;
            }
            Ablation::Full => {}
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Ema => "ema",
            Ablation::Intrax => "intrax",
            Ablation::Interx => "interx",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown ablation {s:?}; expected baseline, ema, intrax, interx, or full"
                ))
            })
    }
}
