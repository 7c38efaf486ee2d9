//! The toy epsilon-prediction denoiser and its low-rank adapters.
//!
//! The denoiser is a stack of affine layers. Its input is the flattened noisy
//! image concatenated with a sinusoidal embedding of the timestep; SiLU sits
//! between hidden layers and the output layer is linear. Activations are laid
//! out as `[features, batch]` so the same code serves single samples and
//! training batches.

mod weights;

use std::collections::BTreeMap;

use crate::diffusion::NoiseSource;
use crate::error::{Error, Result};
use crate::numerics::{GradientTrace, Tensor, Var};

pub use weights::{decode_weights, encode_weights, load_weights, save_weights, NamedTensors};

pub const DEFAULT_TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_RANK: usize = 4;
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Sinusoidal embedding: entry `2k` is `sin(t w_k)`, entry `2k+1` is
/// `cos(t w_k)`, with `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Contract(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let t = t as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Tensor::vector(out)
}

/// Embeddings for a batch of timesteps laid out as `[dim, batch]`.
pub fn time_embedding_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let b = ts.len();
    let mut data = vec![0.0; dim * b];
    for (j, &t) in ts.iter().enumerate() {
        let e = time_embedding(t, dim)?;
        for (i, &v) in e.data().iter().enumerate() {
            data[i * b + j] = v;
        }
    }
    Tensor::matrix(dim, b, data)
}

/// One affine layer `y = W x + b` with frozen base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (m, _) = weight.dims2()?;
        if weight.shape().len() != 2 || bias.shape() != [m] {
            return Err(Error::Dimension(format!(
                "layer weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `(W0 + delta) x + b`, or `W0 x + b` when no delta is given.
pub fn forward_layer(layer: &LinearLayer, delta: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let y = match delta {
        Some(d) => {
            if d.shape() != layer.weight.shape() {
                return Err(Error::Dimension(format!(
                    "adapter delta {:?} does not match layer weight {:?}",
                    d.shape(),
                    layer.weight.shape()
                )));
            }
            layer.weight.add(d)?.matmul(x)?
        }
        None => layer.weight.matmul(x)?,
    };
    let bias = if y.shape().len() == 1 {
        layer.bias.clone()
    } else {
        layer.bias.reshape(vec![layer.out_dim(), 1])?
    };
    if y.shape().len() == 2 && y.shape()[1] != 1 {
        return Err(Error::Dimension(
            "forward_layer expects a single column".into(),
        ));
    }
    y.add(&bias)
}

/// Low-rank update `(alpha / r) * up * down` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    /// `A`, shape `[r, n]`
    pub down: Tensor,
    /// `B`, shape `[m, r]`
    pub up: Tensor,
    pub alpha: f64,
}

impl LoraLayer {
    pub fn new(down: Tensor, up: Tensor, alpha: f64) -> Result<Self> {
        let (r, n) = down.dims2()?;
        let (m, r2) = up.dims2()?;
        if down.shape().len() != 2 || up.shape().len() != 2 || r != r2 {
            return Err(Error::Dimension(format!(
                "adapter factors {:?} (down) and {:?} (up) do not chain",
                down.shape(),
                up.shape()
            )));
        }
        if r > m.min(n) {
            return Err(Error::Validation(format!("rank {r} exceeds min({m}, {n})")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { down, up, alpha })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Output and input width of the adapted layer.
    pub fn dims(&self) -> (usize, usize) {
        (self.up.shape()[0], self.down.shape()[1])
    }

    /// Effective weight update, shape `[m, n]`.
    pub fn delta(&self) -> Result<Tensor> {
        self.up.matmul(&self.down)?.scale(self.scale())
    }

    /// `(alpha / r) * B (A x)` without forming the full matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.up.matmul(&self.down.matmul(x)?)?.scale(self.scale())
    }
}

/// A set of per-layer low-rank updates for one concept (content or style).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LoraAdapter {
    pub layers: BTreeMap<usize, LoraLayer>,
}

impl LoraAdapter {
    /// Standard zero-start initialization: `A ~ N(0, 0.02^2)`, `B = 0`, `alpha = r`.
    pub fn init(model: &DenoiserModel, rank: usize, seed: u64) -> Result<Self> {
        let mut noise = NoiseSource::new(seed);
        let mut layers = BTreeMap::new();
        for i in model.adapted_layer_indices() {
            let layer = &model.layers[i];
            let (m, n) = (layer.out_dim(), layer.in_dim());
            let down = noise.normal_tensor(&[rank, n], ADAPTER_INIT_STD)?;
            let up = Tensor::zeros(&[m, rank]);
            layers.insert(i, LoraLayer::new(down, up, rank as f64)?);
        }
        Ok(Self { layers })
    }

    /// An adapter whose every update is exactly zero.
    pub fn zeros(model: &DenoiserModel, rank: usize) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for i in model.adapted_layer_indices() {
            let layer = &model.layers[i];
            let down = Tensor::zeros(&[rank, layer.in_dim()]);
            let up = Tensor::zeros(&[layer.out_dim(), rank]);
            layers.insert(i, LoraLayer::new(down, up, rank as f64)?);
        }
        Ok(Self { layers })
    }

    pub fn get(&self, layer: usize) -> Option<&LoraLayer> {
        self.layers.get(&layer)
    }

    /// Checks that every referenced layer exists and has matching shape.
    pub fn validate_against(&self, model: &DenoiserModel) -> Result<()> {
        for (&i, lora) in &self.layers {
            let layer = model.layers.get(i).ok_or_else(|| {
                Error::Validation(format!(
                    "adapter references layer {i} but the model has {} layers",
                    model.layers.len()
                ))
            })?;
            if lora.dims() != (layer.out_dim(), layer.in_dim()) {
                return Err(Error::Validation(format!(
                    "adapter layer {i} has shape {:?}, model layer is {:?}",
                    lora.dims(),
                    (layer.out_dim(), layer.in_dim())
                )));
            }
        }
        Ok(())
    }

    pub fn to_named(&self) -> Result<NamedTensors> {
        let mut out = NamedTensors::new();
        for (i, l) in &self.layers {
            out.insert(format!("layers.{i}.lora_down"), l.down.clone());
            out.insert(format!("layers.{i}.lora_up"), l.up.clone());
            out.insert(format!("layers.{i}.alpha"), Tensor::scalar(l.alpha)?);
        }
        Ok(out)
    }

    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for i in layer_indices(named, "lora_down")? {
            let get = |suffix: &str| {
                named.get(&format!("layers.{i}.{suffix}")).ok_or_else(|| {
                    Error::format(Some(&format!("layers.{i}.{suffix}")), "missing tensor")
                })
            };
            let alpha = get("alpha")?.item()?;
            let layer = LoraLayer::new(get("lora_down")?.clone(), get("lora_up")?.clone(), alpha)?;
            layers.insert(i, layer);
        }
        Ok(Self { layers })
    }
}

fn layer_indices(named: &NamedTensors, suffix: &str) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for name in named.keys() {
        let Some(rest) = name.strip_prefix("layers.") else {
            continue;
        };
        let Some(idx) = rest.strip_suffix(&format!(".{suffix}")) else {
            continue;
        };
        let i = idx
            .parse()
            .map_err(|_| Error::format(Some(name), "layer index is not an integer"))?;
        out.push(i);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Flattened image size `D`.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    /// Layers that accept adapters; `None` means all.
    #[serde(default)]
    pub adapted_layers: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            hidden: vec![256, 256, 256],
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
            adapted_layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub layers: Vec<LinearLayer>,
    time_embed_dim: usize,
    adapted: Vec<bool>,
}

/// Per-layer parameter handles used when differentiating through the model.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    /// `(down, up, scale)` of an adapter applied in factored form.
    pub lora: Option<(Var, Var, f64)>,
}

impl DenoiserModel {
    pub fn new(layers: Vec<LinearLayer>, time_embed_dim: usize) -> Result<Self> {
        let adapted = vec![true; layers.len()];
        let model = Self {
            layers,
            time_embed_dim,
            adapted,
        };
        model.check_chain()?;
        Ok(model)
    }

    fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Validation(format!(
                "time embedding dimension must be even, got {}",
                self.time_embed_dim
            )));
        }
        let d = self.input_dim();
        if self.layers[0].in_dim() != d + self.time_embed_dim {
            return Err(Error::Validation(format!(
                "first layer takes {} inputs, expected {} + {}",
                self.layers[0].in_dim(),
                d,
                self.time_embed_dim
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Validation(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    /// He-style Gaussian weights, zero biases.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut noise = NoiseSource::new(seed);
        let mut widths = vec![config.input_dim + config.time_embed_dim];
        widths.extend(&config.hidden);
        widths.push(config.input_dim);
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let (n, m) = (pair[0], pair[1]);
            let std = (2.0 / n as f64).sqrt();
            let weight = noise.normal_tensor(&[m, n], std)?;
            layers.push(LinearLayer::new(weight, Tensor::zeros(&[m]))?);
        }
        let mut model = Self::new(layers, config.time_embed_dim)?;
        if let Some(adapted) = &config.adapted_layers {
            model.set_adapted_layers(adapted)?;
        }
        Ok(model)
    }

    pub fn set_adapted_layers(&mut self, indices: &[usize]) -> Result<()> {
        let mut adapted = vec![false; self.layers.len()];
        for &i in indices {
            *adapted
                .get_mut(i)
                .ok_or_else(|| Error::Validation(format!("adapted layer {i} does not exist")))? =
                true;
        }
        self.adapted = adapted;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn is_adapted(&self, layer: usize) -> bool {
        self.adapted.get(layer).copied().unwrap_or(false)
    }

    pub fn adapted_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.adapted[i])
            .collect()
    }

    pub fn is_output_layer(&self, layer: usize) -> bool {
        layer + 1 == self.layers.len()
    }

    /// `[x_t ; embed(t)]` for a `[D, batch]` latent.
    pub fn embed_input(&self, tr: &mut GradientTrace, x: Var, ts: &[usize]) -> Result<Var> {
        let (d, b) = tr.value(x)?.dims2()?;
        if d != self.input_dim() || b != ts.len() {
            return Err(Error::Dimension(format!(
                "latent has shape [{d}, {b}], model expects [{}, {}]",
                self.input_dim(),
                ts.len()
            )));
        }
        let x = tr.reshape(x, vec![d, b])?;
        let emb = tr.constant(time_embedding_batch(ts, self.time_embed_dim)?);
        tr.concat_rows(x, emb)
    }

    /// Applies layer `i` with the given (possibly merged) weight matrix, then
    /// the hidden activation unless `i` is the output layer.
    pub fn apply_layer(
        &self,
        tr: &mut GradientTrace,
        i: usize,
        weight: Var,
        bias: Var,
        h: Var,
    ) -> Result<Var> {
        let y = tr.matmul(weight, h)?;
        let y = tr.add_bias(y, bias)?;
        self.activate(tr, i, y)
    }

    /// Adds the latent to the last layer's output: the layers model
    /// `eps - x_t`, which keeps the high-noise end of sampling stable.
    pub fn skip(&self, tr: &mut GradientTrace, x: Var, out: Var) -> Result<Var> {
        let shape = tr.value(out)?.shape().to_vec();
        let x = tr.reshape(x, shape)?;
        tr.add(out, x)
    }

    pub fn activate(&self, tr: &mut GradientTrace, i: usize, y: Var) -> Result<Var> {
        if self.is_output_layer(i) {
            Ok(y)
        } else {
            tr.silu(y)
        }
    }

    /// Registers every base parameter as a trace input (base training).
    pub fn parameter_vars(&self, tr: &mut GradientTrace) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tr.input(l.weight.clone()),
                bias: tr.input(l.bias.clone()),
                lora: None,
            })
            .collect()
    }

    /// Full forward pass with explicit parameter handles; adapters, when
    /// present, are applied in factored form `W0 h + s B (A h)`.
    pub fn forward_with_vars(
        &self,
        tr: &mut GradientTrace,
        params: &[LayerVars],
        x: Var,
        ts: &[usize],
    ) -> Result<Var> {
        if params.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} parameter sets for {} layers",
                params.len(),
                self.layers.len()
            )));
        }
        let mut h = self.embed_input(tr, x, ts)?;
        for (i, p) in params.iter().enumerate() {
            let mut y = tr.matmul(p.weight, h)?;
            if let Some((down, up, scale)) = p.lora {
                let a = tr.matmul(down, h)?;
                let ba = tr.matmul(up, a)?;
                let ba = tr.scale(ba, scale)?;
                y = tr.add(y, ba)?;
            }
            let y = tr.add_bias(y, p.bias)?;
            h = self.activate(tr, i, y)?;
        }
        self.skip(tr, x, h)
    }

    /// Epsilon prediction with at most one adapter merged into the weights.
    pub fn predict_epsilon(
        &self,
        adapter: Option<&LoraAdapter>,
        x_t: &Tensor,
        t: usize,
    ) -> Result<Tensor> {
        let mut tr = GradientTrace::inactive();
        let x = tr.constant(x_t.reshape(vec![x_t.len(), 1])?);
        let mut h = self.embed_input(&mut tr, x, &[t])?;
        for (i, layer) in self.layers.iter().enumerate() {
            let delta = match adapter.and_then(|a| a.get(i)) {
                Some(l) if self.is_adapted(i) => Some(l.delta()?),
                _ => None,
            };
            let w = match delta {
                Some(d) => layer.weight.add(&d)?,
                None => layer.weight.clone(),
            };
            let w = tr.constant(w);
            let b = tr.constant(layer.bias.clone());
            h = self.apply_layer(&mut tr, i, w, b, h)?;
        }
        let eps = self.skip(&mut tr, x, h)?;
        Ok(tr.value(eps)?.flatten())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(format!("layers.{i}.weight"), l.weight.clone());
            out.insert(format!("layers.{i}.bias"), l.bias.clone());
        }
        out
    }

    /// Rebuilds a model from its weight file; the time embedding width is
    /// inferred from the first layer.
    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let mut layers = Vec::new();
        for (pos, i) in layer_indices(named, "weight")?.into_iter().enumerate() {
            if i != pos {
                return Err(Error::format(
                    Some(&format!("layers.{pos}.weight")),
                    "missing tensor",
                ));
            }
            let w = named[&format!("layers.{i}.weight")].clone();
            let b = named
                .get(&format!("layers.{i}.bias"))
                .ok_or_else(|| Error::format(Some(&format!("layers.{i}.bias")), "missing tensor"))?
                .clone();
            layers.push(LinearLayer::new(w, b)?);
        }
        let (Some(first), Some(last)) = (layers.first(), layers.last()) else {
            return Err(Error::format(None, "no model layers found"));
        };
        let tdim = first.in_dim().checked_sub(last.out_dim()).ok_or_else(|| {
            Error::Validation("first layer is narrower than the model output".into())
        })?;
        Self::new(layers, tdim)
    }
}
