use std::fmt::Write as _;

use rayon::prelude::*;

use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::fusion::{Criterion, FusedDenoiser, FusionPolicy};
use crate::guidance::{generate_references, GuidanceContext, References, Scores};
use crate::model::{DenoiserModel, LoraAdapter};

pub const DEFAULT_EVAL_SEEDS: usize = 20;
pub const SCALE_GRID: [f64; 5] = [0.0, 1.0, 5.0, 10.0, 20.0];

/// A policy with optional guidance at scale `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySpec {
    pub label: String,
    pub policy: FusionPolicy,
    pub guidance: Option<f64>,
}

impl PolicySpec {
    pub fn new(policy: FusionPolicy, guidance: Option<f64>) -> Self {
        let label = match guidance {
            Some(m) => format!("{}+guide(m={m})", policy.label()),
            None => policy.label(),
        };
        Self {
            label,
            policy,
            guidance,
        }
    }

    /// The comparison table: base, single adapters, the two static
    /// baselines, and input-adaptive selection with and without guidance.
    pub fn comparison(criterion: Criterion, m: f64) -> Vec<Self> {
        vec![
            Self::new(FusionPolicy::BaseOnly, None),
            Self::new(FusionPolicy::ContentOnly, None),
            Self::new(FusionPolicy::StyleOnly, None),
            Self::new(
                FusionPolicy::DirectMerge {
                    content: 1.0,
                    style: 1.0,
                },
                None,
            ),
            Self::new(FusionPolicy::MagnitudeTopK { k: None }, None),
            Self::new(FusionPolicy::FeatureSelect(criterion), None),
            Self::new(FusionPolicy::FeatureSelect(criterion), Some(m)),
        ]
    }
}

/// The three scores of one generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct RunScore {
    pub label: String,
    pub seed: u64,
    pub scores: Scores,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySummary {
    pub label: String,
    pub runs: usize,
    /// style encoder against the style reference
    pub style_sim: Stat,
    /// content encoder against the content reference
    pub content_sim_c: Stat,
    /// content encoder against the style reference
    pub content_sim_s: Stat,
    pub combined: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunScore>,
    pub summaries: Vec<PolicySummary>,
}

/// Labels written into the report's leading comment line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportHeader {
    pub config_hash: String,
    pub criterion: Criterion,
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

impl ScoreReport {
    pub fn summary(&self, label: &str) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.label == label)
    }

    pub fn to_csv(&self, header: &ReportHeader) -> String {
        let mut out = format!(
            "# config_hash={} seeds={} criterion={} dot_criterion=negated topk=simplified-magnitude-baseline\n",
            header.config_hash,
            self.seeds.len(),
            header.criterion.name()
        );
        out.push_str(
            "policy,runs,style_sim_mean,style_sim_std,content_sim_c_mean,content_sim_c_std,\
content_sim_s_mean,content_sim_s_std,combined_mean,combined_std\n",
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.label,
                s.runs,
                fmt(s.style_sim.mean),
                fmt(s.style_sim.std),
                fmt(s.content_sim_c.mean),
                fmt(s.content_sim_c.std),
                fmt(s.content_sim_s.mean),
                fmt(s.content_sim_s.std),
                fmt(s.combined.mean),
                fmt(s.combined.std),
            );
        }
        out
    }
}

/// Samples and scores every policy for every seed. References are generated
/// once per seed and shared by all policies.
pub fn evaluate(
    model: &DenoiserModel,
    content: &LoraAdapter,
    style: &LoraAdapter,
    schedule: &NoiseSchedule,
    specs: &[PolicySpec],
    seeds: &[u64],
    num_steps: usize,
) -> Result<ScoreReport> {
    if seeds.is_empty() {
        return Err(Error::Validation(
            "evaluation needs at least one seed".into(),
        ));
    }
    let fused: Vec<FusedDenoiser<'_>> = specs
        .iter()
        .map(|s| FusedDenoiser::new(model, Some(content), Some(style), s.policy))
        .collect::<Result<_>>()?;
    let per_seed: Vec<Vec<RunScore>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SamplerConfig::new(num_steps, seed);
            let refs = generate_references(model, content, style, schedule, &cfg)?;
            let scorer = GuidanceContext::new(refs.content.clone(), refs.style.clone(), 0.0)?;
            specs
                .iter()
                .zip(&fused)
                .map(|(spec, f)| {
                    let image = run_one(f, schedule, &refs, spec.guidance, &cfg)?;
                    Ok(RunScore {
                        label: spec.label.clone(),
                        seed,
                        scores: scorer.scores(&image)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let runs: Vec<RunScore> = per_seed.into_iter().flatten().collect();
    let summaries = specs
        .iter()
        .map(|spec| {
            let mine: Vec<&Scores> = runs
                .iter()
                .filter(|r| r.label == spec.label)
                .map(|r| &r.scores)
                .collect();
            let col =
                |f: fn(&Scores) -> f64| Stat::of(&mine.iter().map(|s| f(s)).collect::<Vec<_>>());
            PolicySummary {
                label: spec.label.clone(),
                runs: mine.len(),
                style_sim: col(|s| s.s3),
                content_sim_c: col(|s| s.s1),
                content_sim_s: col(|s| s.s2),
                combined: col(Scores::combined),
            }
        })
        .collect();
    Ok(ScoreReport {
        seeds: seeds.to_vec(),
        runs,
        summaries,
    })
}

fn run_one(
    fused: &FusedDenoiser<'_>,
    schedule: &NoiseSchedule,
    refs: &References,
    guidance: Option<f64>,
    cfg: &SamplerConfig,
) -> Result<crate::numerics::Tensor> {
    let ctx = guidance
        .map(|m| GuidanceContext::new(refs.content.clone(), refs.style.clone(), m))
        .transpose()?;
    Ok(sample(fused, schedule, ctx.as_ref(), cfg)?.image)
}

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub key: String,
    pub style_sim: f64,
    pub content_sim: f64,
    pub combined: f64,
}

impl AblationRow {
    fn from_summary(key: String, s: &PolicySummary) -> Self {
        Self {
            key,
            style_sim: s.style_sim.mean,
            content_sim: s.content_sim_c.mean,
            combined: s.combined.mean,
        }
    }
}

pub fn ablation_csv(key_name: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{key_name},style_sim,content_sim,combined\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.key,
            fmt(r.style_sim),
            fmt(r.content_sim),
            fmt(r.combined)
        );
    }
    out
}

/// Selection criteria without guidance.
pub fn criterion_ablation(
    model: &DenoiserModel,
    content: &LoraAdapter,
    style: &LoraAdapter,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    num_steps: usize,
) -> Result<Vec<AblationRow>> {
    let specs: Vec<PolicySpec> = Criterion::ALL
        .iter()
        .map(|&c| PolicySpec::new(FusionPolicy::FeatureSelect(c), None))
        .collect();
    let report = evaluate(model, content, style, schedule, &specs, seeds, num_steps)?;
    Ok(Criterion::ALL
        .iter()
        .zip(&report.summaries)
        .map(|(c, s)| AblationRow::from_summary(c.name().into(), s))
        .collect())
}

/// Guidance scales over [`SCALE_GRID`] with the given criterion.
pub fn scale_ablation(
    model: &DenoiserModel,
    content: &LoraAdapter,
    style: &LoraAdapter,
    schedule: &NoiseSchedule,
    criterion: Criterion,
    seeds: &[u64],
    num_steps: usize,
) -> Result<Vec<AblationRow>> {
    let specs: Vec<PolicySpec> = SCALE_GRID
        .iter()
        .map(|&m| PolicySpec::new(FusionPolicy::FeatureSelect(criterion), Some(m)))
        .collect();
    let report = evaluate(model, content, style, schedule, &specs, seeds, num_steps)?;
    Ok(SCALE_GRID
        .iter()
        .zip(&report.summaries)
        .map(|(m, s)| AblationRow::from_summary(format!("{m}"), s))
        .collect())
}
