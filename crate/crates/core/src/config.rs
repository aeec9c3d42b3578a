//! Run configuration: one schema shared by config files, CLI overrides, and
//! checkpoints.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Model wiring selected for a run. The seven variants form the ablation
/// ladder from the cue-only baseline to the full model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Variant {
    B1,
    #[serde(rename = "B2_noCAM")]
    B2NoCam,
    B2,
    B3,
    #[serde(rename = "B4_noSAM")]
    B4NoSam,
    #[serde(rename = "B4_noSFF")]
    B4NoSff,
    B4,
}

impl Variant {
    /// Every variant, in ablation-table row order.
    pub const ALL: [Variant; 7] = [
        Variant::B1,
        Variant::B2NoCam,
        Variant::B2,
        Variant::B3,
        Variant::B4NoSam,
        Variant::B4NoSff,
        Variant::B4,
    ];

    /// Identifier used in configs and flags.
    pub fn key(self) -> &'static str {
        match self {
            Variant::B1 => "B1",
            Variant::B2NoCam => "B2_noCAM",
            Variant::B2 => "B2",
            Variant::B3 => "B3",
            Variant::B4NoSam => "B4_noSAM",
            Variant::B4NoSff => "B4_noSFF",
            Variant::B4 => "B4",
        }
    }

    /// Row label used in the ablation table.
    pub fn display_label(self) -> &'static str {
        match self {
            Variant::B1 => "B1",
            Variant::B2NoCam => "B2 w/o CAM",
            Variant::B2 => "B2",
            Variant::B3 => "B3",
            Variant::B4NoSam => "B4 w/o $L_{SAM}$",
            Variant::B4NoSff => "B4 w/o SFF",
            Variant::B4 => "B4 (ours)",
        }
    }

    /// Scene-token cross-attention and gated multi-scale mixing.
    pub fn uses_context_mixer(self) -> bool {
        !matches!(self, Variant::B1 | Variant::B2NoCam)
    }

    /// Lexicon graph encoding and the semantic representation.
    pub fn uses_semantic(self) -> bool {
        matches!(self, Variant::B3 | Variant::B4NoSam | Variant::B4NoSff | Variant::B4)
    }

    /// Projection heads + fused two-token group encoder.
    pub fn uses_group_encoder(self) -> bool {
        matches!(self, Variant::B4NoSam | Variant::B4NoSff | Variant::B4)
    }

    /// Similarity-gated fusion of the two tokens.
    pub fn uses_similarity_gate(self) -> bool {
        matches!(self, Variant::B4NoSam | Variant::B4)
    }

    /// Alignment-matching loss term.
    pub fn uses_alignment_loss(self) -> bool {
        matches!(self, Variant::B4NoSff | Variant::B4)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown variant '{s}' (expected one of B1, B2_noCAM, B2, B3, B4_noSAM, B4_noSFF, B4)"
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Element type training runs at. 32-bit is the default; 64-bit exists for
/// gradient checking, where 32-bit rounding would swamp the tolerance.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::contract(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

/// Unit the learning-rate decay factor applies per.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DecayUnit {
    #[serde(rename = "epoch")]
    Epoch,
    #[serde(rename = "iteration")]
    Iteration,
}

/// How the per-class semantic matrix is pooled into one vector: elementwise
/// sum of mean- and max-pooling, or their concatenation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SemanticPool {
    #[serde(rename = "sum")]
    Sum,
    #[serde(rename = "concat")]
    Concat,
}

/// Complete run configuration. Every field has a default; a config file may
/// set any subset and CLI flags override file values last-wins.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Token width shared by every attention stack.
    pub hidden: usize,
    /// Attention heads per block; must divide `hidden`.
    pub heads: usize,
    /// Encoder blocks in the visual fusion stack and the group stack.
    pub fusion_depth: usize,
    /// Scene pyramid levels (K).
    pub scene_scales: usize,
    /// Word/class embedding width (d_e).
    pub embed_dim: usize,
    /// Width of graph-convolution outputs; defaults to `embed_dim`.
    pub gcn_hidden: Option<usize>,
    /// Dropout rate inside FFNs and between graph-convolution layers.
    pub dropout: f64,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Multiplicative learning-rate decay factor.
    pub lr_decay: f64,
    /// Whether decay applies per epoch or per optimizer step.
    pub lr_decay_per: DecayUnit,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Temperature for the alignment-matching softmax.
    pub tau: f64,
    /// Stability constant inside the alignment-matching log.
    pub sam_eps: f64,
    /// Use the literal `exp(tau * sim)` reading instead of `exp(sim / tau)`.
    pub sam_alpha_literal: bool,
    /// Per-class semantic pooling arrangement.
    pub esem_pool: SemanticPool,
    /// One shared gate scalar per scene scale instead of per-row gates.
    pub gate_per_scale: bool,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub precision: Precision,
    /// Dataset manifest (or the directory containing `manifest.json`).
    pub data: Option<PathBuf>,
    /// Lexicon file.
    pub lexicons: Option<PathBuf>,
    /// Output directory for logs, checkpoints, and tables.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 512,
            heads: 8,
            fusion_depth: 4,
            scene_scales: 4,
            embed_dim: 50,
            gcn_hidden: None,
            dropout: 0.1,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_per: DecayUnit::Epoch,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            tau: 0.02,
            sam_eps: 1e-8,
            sam_alpha_literal: false,
            esem_pool: SemanticPool::Sum,
            gate_per_scale: false,
            epochs: 30,
            seed: 0,
            variant: Variant::B4,
            precision: Precision::F32,
            data: None,
            lexicons: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Graph-convolution width, with its default applied.
    pub fn gcn_width(&self) -> usize {
        self.gcn_hidden.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, bool); 9] = [
            ("hidden", self.hidden > 0),
            ("heads", self.heads > 0),
            ("fusion_depth", self.fusion_depth > 0),
            ("scene_scales", self.scene_scales > 0),
            ("embed_dim", self.embed_dim > 0),
            ("batch_size", self.batch_size > 0),
            ("epochs", self.epochs > 0),
            ("lr", self.lr > 0.0),
            ("tau", self.tau > 0.0),
        ];
        for (field, ok) in positive {
            if !ok {
                return Err(Error::contract(format!("config: {field} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::contract(format!(
                "config: heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!(
                "config: dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::contract(format!(
                "config: lr_decay {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::contract(format!("config: {field} {v} must lie in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::contract("config: adam_eps must be positive".to_string()));
        }
        if self.sam_eps < 0.0 {
            return Err(Error::contract("config: sam_eps must be nonnegative".to_string()));
        }
        if self.gcn_width() == 0 {
            return Err(Error::contract("config: gcn_hidden must be positive".to_string()));
        }
        Ok(())
    }

    /// Learning rate at a given epoch/step under the decay schedule.
    pub fn lr_at(&self, epoch: usize, global_step: usize) -> f64 {
        match self.lr_decay_per {
            DecayUnit::Epoch => self.lr * self.lr_decay.powi(epoch as i32),
            DecayUnit::Iteration => self.lr * self.lr_decay.powi(global_step as i32),
        }
    }
}
