use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lorafuse_core::bench::{BenchConfig, SyntheticSpec, TrainConfig};
use lorafuse_core::diffusion::{NoiseSchedule, SamplerConfig};
use lorafuse_core::fusion::{Criterion, FusionPolicy};
use lorafuse_core::model::ModelConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub fusion: FusionSection,
    pub guidance: GuidanceSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapted_layers: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            input_dim: m.input_dim,
            hidden: m.hidden,
            time_embed_dim: m.time_embed_dim,
            rank: lorafuse_core::model::DEFAULT_RANK,
            adapted_layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        use lorafuse_core::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS};
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            steps: s.num_steps,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// base | content | style | merge | kl | topk
    pub policy: String,
    pub criterion: Criterion,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub merge_content: f64,
    pub merge_style: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            policy: "kl".into(),
            criterion: Criterion::Kl,
            temperature: 1.0,
            k: None,
            merge_content: 1.0,
            merge_style: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub enabled: bool,
    pub m: f64,
    pub stride: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            enabled: true,
            m: lorafuse_core::guidance::DEFAULT_SCALE,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_steps: usize,
    pub adapter_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub images_per_cell: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let b = TrainConfig::base();
        Self {
            base_steps: b.steps,
            adapter_steps: TrainConfig::adapter().steps,
            lr: b.lr,
            batch_size: b.batch_size,
            seed: 0,
            images_per_cell: lorafuse_core::bench::DEFAULT_IMAGES_PER_CELL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            seed: s.seed,
            noise: s.noise,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved configuration text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.model.input_dim,
            hidden: self.model.hidden.clone(),
            time_embed_dim: self.model.time_embed_dim,
            adapted_layers: self.model.adapted_layers.clone(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        Ok(NoiseSchedule::linear(
            s.train_steps,
            s.beta_start,
            s.beta_end,
        )?)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig::new(self.sampler.steps, self.sampler.seed)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            noise: self.data.noise,
            seed: self.data.seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.base_steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        }
    }

    /// The style adapter is trained with `seed + 1`.
    pub fn adapter_train(&self, style: bool) -> TrainConfig {
        TrainConfig {
            steps: self.train.adapter_steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed: self.train.seed.wrapping_add(1 + u64::from(style)),
        }
    }

    pub fn bench(&self) -> Result<BenchConfig, CliError> {
        Ok(BenchConfig {
            model: self.model_config(),
            data: self.synthetic(),
            images_per_cell: self.train.images_per_cell,
            base: self.base_train(),
            adapter: self.adapter_train(false),
            rank: self.model.rank,
            schedule: self.schedule()?,
        })
    }

    pub fn policy(&self) -> Result<FusionPolicy, CliError> {
        policy_from_name(&self.fusion.policy, &self.fusion)
    }
}

pub fn policy_from_name(name: &str, f: &FusionSection) -> Result<FusionPolicy, CliError> {
    let policy = match name {
        "base" => FusionPolicy::BaseOnly,
        "content" => FusionPolicy::ContentOnly,
        "style" => FusionPolicy::StyleOnly,
        "merge" => FusionPolicy::DirectMerge {
            content: f.merge_content,
            style: f.merge_style,
        },
        "kl" => FusionPolicy::FeatureSelect(f.criterion),
        "topk" => FusionPolicy::MagnitudeTopK { k: f.k },
        other => {
            return Err(CliError::Usage(format!(
                "unknown fusion policy '{other}' (expected base, content, style, merge, kl or topk)"
            )))
        }
    };
    policy.validate()?;
    Ok(policy)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
