//! Synthetic data, toy training and the evaluation harness.

mod eval;
mod synthetic;
mod train;

pub use eval::{
    ablation_csv, criterion_ablation, evaluate, scale_ablation, AblationRow, PolicySpec,
    PolicySummary, ReportHeader, RunScore, ScoreReport, Stat, DEFAULT_EVAL_SEEDS, SCALE_GRID,
};
pub use synthetic::{
    all_cells, content_cells, make_dataset, render, style_cells, ContentClass, LabeledImage,
    StyleClass, SyntheticSpec, NOISE_AMPLITUDE, SIDE,
};
pub use train::{
    train_adapter, train_base, Adam, TrainConfig, DEFAULT_ADAPTER_STEPS, DEFAULT_BASE_STEPS,
    DEFAULT_BATCH, DEFAULT_LR,
};

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::model::{DenoiserModel, LoraAdapter, ModelConfig, DEFAULT_RANK};

pub const DEFAULT_IMAGES_PER_CELL: usize = 32;

/// Everything needed to build the seeded benchmark from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub images_per_cell: usize,
    pub base: TrainConfig,
    pub adapter: TrainConfig,
    pub rank: usize,
    pub schedule: NoiseSchedule,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: SyntheticSpec::default(),
            images_per_cell: DEFAULT_IMAGES_PER_CELL,
            base: TrainConfig::base(),
            adapter: TrainConfig {
                seed: 1,
                ..TrainConfig::adapter()
            },
            rank: DEFAULT_RANK,
            schedule: NoiseSchedule::default(),
        }
    }
}

/// A trained base model with its content and style adapters.
#[derive(Clone, Debug)]
pub struct Bench {
    pub model: DenoiserModel,
    pub content: LoraAdapter,
    pub style: LoraAdapter,
    pub schedule: NoiseSchedule,
    pub base_losses: Vec<f64>,
    pub content_losses: Vec<f64>,
    pub style_losses: Vec<f64>,
}

impl Bench {
    pub fn train(cfg: &BenchConfig) -> Result<Self> {
        let schedule = cfg.schedule.clone();
        let n = cfg.images_per_cell;
        let all = make_dataset(&cfg.data, &all_cells(), n)?;
        let (model, base_losses) = train_base(&cfg.model, &all, &schedule, &cfg.base)?;
        let content_data = make_dataset(&cfg.data, &content_cells(), n)?;
        let style_data = make_dataset(&cfg.data, &style_cells(), n)?;
        let (content, content_losses) =
            train_adapter(&model, &content_data, &schedule, &cfg.adapter, cfg.rank)?;
        let style_cfg = TrainConfig {
            seed: cfg.adapter.seed.wrapping_add(1),
            ..cfg.adapter
        };
        let (style, style_losses) =
            train_adapter(&model, &style_data, &schedule, &style_cfg, cfg.rank)?;
        Ok(Self {
            model,
            content,
            style,
            schedule,
            base_losses,
            content_losses,
            style_losses,
        })
    }
}
