//! Run configuration shared by every experiment.
//!
//! One TOML document with a default for every key. The defaults are the
//! desk-scale setup: a one-block denoiser small enough to train in seconds
//! on a single core.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::{HybridConfig, Objective};
use crate::rl::RlConfig;
use crate::scenarios::{Mix, SceneKind, CTX_FEATURES, CTX_TOKENS, HORIZON};
use crate::schedule::{NoiseSchedule, Space};
use crate::train::TrainConfig;
use crate::trajectory::Representation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: u64,
    pub seed: u64,
    pub mix: Mix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 2000,
            seed: 1,
            mix: Mix::uniform(),
        }
    }
}

/// Denoiser shape; horizon and context sizes follow the scene format and the
/// prediction space follows the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub representation: Representation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            hidden: 32,
            heads: 2,
            mlp_ratio: 4,
            representation: Representation::Velocity,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn denoiser(&self, pred_space: Space) -> DenoiserConfig {
        self.denoiser_with(self.representation, pred_space)
    }

    pub fn denoiser_with(&self, representation: Representation, pred_space: Space) -> DenoiserConfig {
        DenoiserConfig {
            blocks: self.blocks,
            hidden: self.hidden,
            heads: self.heads,
            horizon: HORIZON,
            ctx_tokens: CTX_TOKENS,
            ctx_features: CTX_FEATURES,
            mlp_ratio: self.mlp_ratio,
            representation,
            pred_space,
        }
    }
}

/// Held-out scenes and how they are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetConfig {
    pub scenes: u64,
    pub seed: u64,
    pub mix: Mix,
    pub metrics: EvalConfig,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            scenes: 40,
            seed: 99,
            mix: Mix::uniform(),
            metrics: EvalConfig {
                divergence_generations: 0,
                ..EvalConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlRunConfig {
    pub algo: RlConfig,
    /// Replay scenes rolled out during post-training.
    pub train_scenes: u64,
    pub train_seed: u64,
    /// Scene kinds for both the replay and the held-out set.
    pub mix: Mix,
}

impl Default for RlRunConfig {
    fn default() -> Self {
        Self {
            algo: RlConfig::default(),
            train_scenes: 200,
            train_seed: 7,
            mix: Mix::only(SceneKind::LaneChangeBimodal),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    /// Nested training-set sizes, each a prefix of the largest.
    pub sizes: Vec<u64>,
    pub kind: SceneKind,
    pub data_seed: u64,
    pub eval_scenes: u64,
    pub eval_seed: u64,
    pub divergence_generations: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            kind: SceneKind::LaneChangeBimodal,
            data_seed: 11,
            eval_scenes: 40,
            eval_seed: 12,
            divergence_generations: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepCompareConfig {
    pub frames: u64,
    /// Scenes whose first generation is written to the speed-profile CSV.
    pub profile_scenes: usize,
}

impl Default for RepCompareConfig {
    fn default() -> Self {
        Self {
            frames: 10_000,
            profile_scenes: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub objective: Objective,
    pub train: TrainConfig,
    /// Open-loop evaluation rows are written every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval: EvalSetConfig,
    pub rl: RlRunConfig,
    pub ablation: AblationConfig,
    pub scaling: ScalingConfig,
    pub rep_compare: RepCompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: NoiseSchedule::default(),
            objective: Objective::Hybrid {
                pred: Space::Data,
                hybrid: HybridConfig::default(),
            },
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            eval_every: 0,
            eval: EvalSetConfig::default(),
            rl: RlRunConfig::default(),
            ablation: AblationConfig::default(),
            scaling: ScalingConfig::default(),
            rep_compare: RepCompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.mix.validate()?;
        self.eval.mix.validate()?;
        self.rl.mix.validate()?;
        self.model.denoiser(self.objective.pred_space()).validate()?;
        self.eval.metrics.sampler.validate()?;
        NoiseSchedule::new(self.schedule.beta_min, self.schedule.beta_max)?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.rl.algo.group_size < 2 {
            return Err(Error::Config("group size must be at least 2".into()));
        }
        if self.scaling.sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("scaling sizes must be non-decreasing".into()));
        }
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        self.model.denoiser(self.objective.pred_space())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("run config always serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
