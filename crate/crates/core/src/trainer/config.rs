use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::globallocal::GlobalLocalVariant;
use crate::masking::{MaskMode, PositionPolicy};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::objectives::{LossWeights, MvmTarget};

pub const SCHEMA_VERSION: u32 = 1;

/// How visual tokens are formed from a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputMode {
    /// Slot-wise mean over all frames, presented as one frame.
    Meanpool,
    /// Every token of every frame, frame-major.
    JointSt,
    GlobalLocal {
        variant: GlobalLocalVariant,
        local_frames: usize,
    },
}

impl InputMode {
    pub fn label(&self) -> String {
        match self {
            InputMode::Meanpool => "meanpool".into(),
            InputMode::JointSt => "joint-st".into(),
            InputMode::GlobalLocal {
                variant,
                local_frames,
            } => format!("global-local:{}:{local_frames}", variant.name()),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// `meanpool`, `joint-st`, or `global-local[:variant[:local_frames]]`.
impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        match parts.next() {
            Some("meanpool") | Some("mean-pool") => Ok(InputMode::Meanpool),
            Some("joint-st") => Ok(InputMode::JointSt),
            Some("global-local") => {
                let variant = parts.next().unwrap_or("adapter").parse()?;
                let local_frames = match parts.next() {
                    Some(n) => n
                        .parse()
                        .map_err(|_| Error::config(format!("bad local frame count {n:?}")))?,
                    None => 8,
                };
                Ok(InputMode::GlobalLocal {
                    variant,
                    local_frames,
                })
            }
            _ => Err(Error::config(format!("unknown input mode {s:?}"))),
        }
    }
}

/// `off`, `static:RHO`, `normal:SIGMA`, or `uniform:LOW:HIGH`.
pub fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |x: &str| -> Result<f64> {
        x.parse()
            .map_err(|_| Error::config(format!("bad number {x:?} in mask mode {s:?}")))
    };
    let mode = match parts.as_slice() {
        ["off"] => MaskMode::Off,
        ["static", rho] => MaskMode::Static { rho: num(rho)? },
        ["normal", sigma] | ["dynamic-normal", sigma] => MaskMode::DynamicNormal {
            sigma: num(sigma)?,
        },
        ["uniform", low, high] | ["dynamic-uniform", low, high] => MaskMode::DynamicUniform {
            low: num(low)?,
            high: num(high)?,
        },
        _ => return Err(Error::config(format!("unknown mask mode {s:?}"))),
    };
    mode.validate()?;
    Ok(mode)
}

/// Whether one mask rate is drawn per sample or shared by a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateGranularity {
    #[default]
    PerSample,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 for a constant rate.
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// Every setting of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Parameter initialisation, training data and mask sampling.
    pub seed: u64,
    /// Evaluation clips; fixed across runs so that cells are comparable.
    pub eval_seed: u64,
    pub task: TaskKind,
    pub frame_size: usize,
    /// Patches per frame side; `K = patch_grid^2`.
    pub patch_grid: usize,
    pub train_frames: usize,
    pub eval_frames: Vec<usize>,
    /// Evaluation clips per frame count. Reversal sets use half as many
    /// trajectories, each shown both ways.
    pub eval_samples: usize,
    pub input_mode: InputMode,
    pub mask_mode: MaskMode,
    pub mvm: bool,
    pub mvm_target: MvmTarget,
    pub loss_weights: LossWeights,
    pub position_policy: PositionPolicy,
    pub rate_granularity: RateGranularity,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            eval_seed: 1_000_003,
            task: TaskKind::Reversal,
            frame_size: 16,
            patch_grid: 2,
            train_frames: 16,
            eval_frames: vec![16],
            eval_samples: 200,
            input_mode: InputMode::JointSt,
            mask_mode: MaskMode::Off,
            mvm: false,
            mvm_target: MvmTarget::Hidden,
            loss_weights: LossWeights::default(),
            position_policy: PositionPolicy::Renumber,
            rate_granularity: RateGranularity::PerSample,
            model: ModelConfig {
                vocab: crate::data::Vocab::default().len(),
                ..ModelConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 32,
            eval_every: 0,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.mask_mode.validate()?;
        let vocab = crate::data::Vocab::default().len();
        if self.model.vocab < vocab {
            return Err(Error::config(format!(
                "model vocabulary {} is smaller than the task vocabulary {vocab}",
                self.model.vocab
            )));
        }
        if self.patch_grid == 0 || self.frame_size % self.patch_grid != 0 {
            return Err(Error::config(format!(
                "frame size {} is not divisible into a {}x{} patch grid",
                self.frame_size, self.patch_grid, self.patch_grid
            )));
        }
        let min = self.task.min_frames();
        for &t in std::iter::once(&self.train_frames).chain(&self.eval_frames) {
            if t < min {
                return Err(Error::config(format!(
                    "{} needs at least {min} frames, got {t}",
                    self.task.name()
                )));
            }
        }
        if let InputMode::GlobalLocal { local_frames, .. } = self.input_mode {
            if local_frames == 0 {
                return Err(Error::config("local frame count must be at least 1"));
            }
            for &t in std::iter::once(&self.train_frames).chain(&self.eval_frames) {
                if local_frames > t {
                    return Err(Error::config(format!(
                        "{local_frames} local frames exceed the {t} frames of a clip"
                    )));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.eval_frames.is_empty() {
            return Err(Error::config("at least one evaluation frame count is required"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("evaluation needs at least one sample"));
        }
        let o = &self.optimizer;
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !positive(o.lr) || !positive(o.eps) || !unit(o.beta1) || !unit(o.beta2) {
            return Err(Error::config(format!("invalid optimizer settings {o:?}")));
        }
        let w = &self.loss_weights;
        if !(w.mvm >= 0.0 && w.llm >= 0.0 && w.mvm.is_finite() && w.llm.is_finite()) {
            return Err(Error::config(format!("invalid loss weights {w:?}")));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Canonical JSON: field order is fixed by the struct definition.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
