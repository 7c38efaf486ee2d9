use crate::diffusion::{NoiseSchedule, NoiseSource};
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, LayerVars, LoraAdapter, ModelConfig};
use crate::numerics::{GradientTrace, Tensor, Var};

use super::synthetic::LabeledImage;

pub const DEFAULT_BASE_STEPS: usize = 2000;
pub const DEFAULT_ADAPTER_STEPS: usize = 1000;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            steps: DEFAULT_BASE_STEPS,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            seed: 0,
        }
    }

    pub fn adapter() -> Self {
        Self {
            steps: DEFAULT_ADAPTER_STEPS,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Validation(format!(
                "training needs lr > 0 and batch >= 1, got lr = {} batch = {}",
                self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Adam with the usual `(0.9, 0.999, 1e-8)` constants.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates every parameter in place from its gradient.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (&gi, pi)) in g.data().iter().zip(p.iter_mut()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                *pi -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// A random minibatch of noised images: `(x_t [D, B], noise [D, B], ts)`.
fn minibatch(
    data: &[LabeledImage],
    schedule: &NoiseSchedule,
    batch: usize,
    rng: &mut NoiseSource,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let d = data[0].image.len();
    let mut xt = vec![0.0; d * batch];
    let mut eps = vec![0.0; d * batch];
    let mut ts = Vec::with_capacity(batch);
    for j in 0..batch {
        let x0 = &data[rng.index(data.len())].image;
        let t = rng.index(schedule.train_steps());
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..d {
            let e = rng.normal();
            eps[i * batch + j] = e;
            xt[i * batch + j] = a * x0.data()[i] + s * e;
        }
        ts.push(t);
    }
    Ok((
        Tensor::matrix(d, batch, xt)?,
        Tensor::matrix(d, batch, eps)?,
        ts,
    ))
}

fn mse(tr: &mut GradientTrace, pred: Var, target: &Tensor) -> Result<Var> {
    let n = target.len() as f64;
    let target = tr.constant(target.clone());
    let diff = tr.sub(pred, target)?;
    let sq = tr.dot(diff, diff)?;
    tr.scale(sq, 1.0 / n)
}

/// Shared loop. `forward` builds the prediction from the current parameter
/// values and returns it with the parameter vars in `params` order.
fn optimize(
    data: &[LabeledImage],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    params: &mut [Vec<f64>],
    mut forward: impl FnMut(&mut GradientTrace, &[Vec<f64>], Var, &[usize]) -> Result<(Var, Vec<Var>)>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    let mut rng = NoiseSource::new(cfg.seed);
    let sizes: Vec<usize> = params.iter().map(Vec::len).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (xt, eps, ts) = minibatch(data, schedule, cfg.batch_size, &mut rng)?;
        let mut tr = GradientTrace::new();
        let x = tr.constant(xt);
        let (pred, vars) = forward(&mut tr, params, x, &ts).map_err(|e| numeric(step, e))?;
        let loss = mse(&mut tr, pred, &eps).map_err(|e| numeric(step, e))?;
        let value = tr.value(loss)?.item()?;
        history.push(value);
        let grads = tr.backward(loss).map_err(|e| numeric(step, e))?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect::<Result<_>>()?;
        adam.step(params, &grads);
        if params.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Numeric {
                step,
                message: "parameters became non-finite".into(),
            });
        }
    }
    Ok(history)
}

fn numeric(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Numeric {
            step,
            message: format!("training aborted: {e}"),
        }
    } else {
        e
    }
}

/// Trains a base denoiser from a seeded random initialization on the
/// epsilon-prediction objective. Returns the model and per-step losses.
pub fn train_base(
    config: &ModelConfig,
    data: &[LabeledImage],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, Vec<f64>)> {
    let mut model = DenoiserModel::random(config, cfg.seed)?;
    let shapes: Vec<Vec<usize>> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
        .collect();
    let mut params: Vec<Vec<f64>> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.to_vec(), l.bias.to_vec()])
        .collect();
    let history = optimize(data, schedule, cfg, &mut params, |tr, params, x, ts| {
        let mut vars = Vec::with_capacity(params.len());
        let mut layers = Vec::with_capacity(params.len() / 2);
        for (p, shape) in params.chunks(2).zip(shapes.chunks(2)) {
            let weight = tr.input(Tensor::new(shape[0].clone(), p[0].clone())?);
            let bias = tr.input(Tensor::new(shape[1].clone(), p[1].clone())?);
            vars.extend([weight, bias]);
            layers.push(LayerVars {
                weight,
                bias,
                lora: None,
            });
        }
        Ok((model.forward_with_vars(tr, &layers, x, ts)?, vars))
    })?;
    for (layer, p) in model.layers.iter_mut().zip(params.chunks(2)) {
        layer.weight = Tensor::new(layer.weight.shape().to_vec(), p[0].clone())?;
        layer.bias = Tensor::new(layer.bias.shape().to_vec(), p[1].clone())?;
    }
    Ok((model, history))
}

/// Trains a low-rank adapter on a frozen base. Only the adapter's down and up
/// projections are updated.
pub fn train_adapter(
    model: &DenoiserModel,
    data: &[LabeledImage],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rank: usize,
) -> Result<(LoraAdapter, Vec<f64>)> {
    let mut adapter = LoraAdapter::init(model, rank, cfg.seed)?;
    let indices: Vec<usize> = adapter.layers.keys().copied().collect();
    let mut params: Vec<Vec<f64>> = adapter
        .layers
        .values()
        .flat_map(|l| [l.down.to_vec(), l.up.to_vec()])
        .collect();
    let shapes: Vec<(Vec<usize>, Vec<usize>, f64)> = adapter
        .layers
        .values()
        .map(|l| (l.down.shape().to_vec(), l.up.shape().to_vec(), l.scale()))
        .collect();
    let history = optimize(data, schedule, cfg, &mut params, |tr, params, x, ts| {
        let mut vars = Vec::with_capacity(params.len());
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, l) in model.layers.iter().enumerate() {
            let weight = tr.constant(l.weight.clone());
            let bias = tr.constant(l.bias.clone());
            let lora = match indices.iter().position(|&k| k == i) {
                Some(pos) => {
                    let (ds, us, scale) = &shapes[pos];
                    let down = tr.input(Tensor::new(ds.clone(), params[2 * pos].clone())?);
                    let up = tr.input(Tensor::new(us.clone(), params[2 * pos + 1].clone())?);
                    vars.extend([down, up]);
                    Some((down, up, *scale))
                }
                None => None,
            };
            layers.push(LayerVars { weight, bias, lora });
        }
        Ok((model.forward_with_vars(tr, &layers, x, ts)?, vars))
    })?;
    for (pos, layer) in adapter.layers.values_mut().enumerate() {
        layer.down = Tensor::new(shapes[pos].0.clone(), params[2 * pos].clone())?;
        layer.up = Tensor::new(shapes[pos].1.clone(), params[2 * pos + 1].clone())?;
    }
    Ok((adapter, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synthetic::{all_cells, make_dataset, SyntheticSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 256,
            hidden: vec![32],
            time_embed_dim: 8,
            adapted_layers: None,
        }
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            lr: 3e-3,
            batch_size: 8,
            seed: 5,
        }
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // after one step the bias-corrected update is lr * sign(g)
        let mut p = vec![vec![1.0, -2.0, 0.5]];
        let g = [Tensor::vector(vec![0.3, -4.0, 1e-3]).unwrap()];
        let mut adam = Adam::new(0.1, &[3]);
        adam.step(&mut p, &g);
        let expect = [
            1.0 - 0.1 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
            0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in p[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn base_loss_decreases() {
        let data = make_dataset(&SyntheticSpec::default(), &all_cells(), 4).unwrap();
        let (_, losses) =
            train_base(&tiny(), &data, &NoiseSchedule::default(), &short(150)).unwrap();
        assert_eq!(losses.len(), 150);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn adapter_training_freezes_base_and_zero_steps_is_noop() {
        let data = make_dataset(&SyntheticSpec::default(), &all_cells(), 2).unwrap();
        let schedule = NoiseSchedule::default();
        let (model, _) = train_base(&tiny(), &data, &schedule, &short(5)).unwrap();
        let before = model.clone();
        let (noop, losses) = train_adapter(&model, &data, &schedule, &short(0), 4).unwrap();
        assert!(losses.is_empty());
        assert!(noop
            .layers
            .values()
            .all(|l| l.up.data().iter().all(|&v| v == 0.0)));
        let (trained, losses) = train_adapter(&model, &data, &schedule, &short(20), 4).unwrap();
        assert_eq!(losses.len(), 20);
        assert!(trained.layers.values().any(|l| l.up.max_abs() > 0.0));
        assert_eq!(model, before);
    }

    #[test]
    fn divergent_training_aborts_with_step() {
        let data = make_dataset(&SyntheticSpec::default(), &all_cells(), 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            ..short(50)
        };
        match train_base(&tiny(), &data, &NoiseSchedule::default(), &cfg) {
            Err(Error::Numeric { step, .. }) => assert!(step < 50),
            other => panic!("{other:?}"),
        }
        assert!(train_base(&tiny(), &[], &NoiseSchedule::default(), &short(1)).is_err());
    }
}
