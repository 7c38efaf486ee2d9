use crate::diffusion::{NoiseSchedule, NoiseSource};
use crate::error::{Error, Result};
use crate::fusion::{FusedDenoiser, SelectionTrace};
use crate::guidance::{guided_step, GuidanceContext};
use crate::numerics::Tensor;

pub const DEFAULT_NUM_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(num_steps: usize, seed: u64) -> Self {
        Self { num_steps, seed }
    }

    /// Strictly decreasing visit order `(n-1) s, ..., s, 0` with stride
    /// `s = train_steps / n`.
    pub fn timesteps(&self, train_steps: usize) -> Result<Vec<usize>> {
        if self.num_steps == 0 || self.num_steps > train_steps {
            return Err(Error::Validation(format!(
                "num_steps must be in 1..={train_steps}, got {}",
                self.num_steps
            )));
        }
        let stride = train_steps / self.num_steps;
        Ok((0..self.num_steps).rev().map(|k| k * stride).collect())
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: Tensor,
    pub trace: SelectionTrace,
    /// Residual of the final image when guidance was active.
    pub final_residual: Option<f64>,
    /// Latent after every step; the last entry is `image`.
    pub trajectory: Vec<Tensor>,
}

/// Runs the reverse process from seeded standard-normal noise.
pub fn sample(
    fused: &FusedDenoiser<'_>,
    schedule: &NoiseSchedule,
    guidance: Option<&GuidanceContext>,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    let steps = config.timesteps(schedule.train_steps())?;
    let d = fused.model().input_dim();
    let mut x = NoiseSource::new(config.seed).normal_tensor(&[d], 1.0)?;
    let mut trace = SelectionTrace::default();
    let mut trajectory = Vec::with_capacity(steps.len());
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied();
        let next = match guidance {
            Some(ctx) if ctx.applies_at(k) => {
                let g = guided_step(ctx, fused, schedule, &x, t, t_prev, k)?;
                trace.push(g.selections);
                g.x_prev
            }
            _ => {
                let (eps, row) = fused.predict(&x, t).map_err(|e| numeric_at(k, e))?;
                trace.push(row);
                schedule
                    .ddim_step(&x, &eps, t, t_prev)
                    .map_err(|e| numeric_at(k, e))?
            }
        };
        x = next;
        trajectory.push(x.clone());
    }
    let final_residual = guidance.map(|ctx| ctx.residual(&x)).transpose()?;
    Ok(SampleOutput {
        image: x,
        trace,
        final_residual,
        trajectory,
    })
}

fn numeric_at(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Numeric {
            step,
            message: e.to_string(),
        }
    } else {
        e
    }
}
