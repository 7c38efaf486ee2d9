//! Per-layer fusion of a content adapter and a style adapter.
//!
//! [`FusionPolicy::FeatureSelect`] is the input-adaptive method: at every
//! adapted layer it evaluates the base branch and both adapted branches on the
//! same incoming feature, measures how far each adapted output moved from the
//! base output, and propagates whichever moved further. The other policies are
//! static references (base only, one adapter only, arithmetic merge, and a
//! weight-magnitude top-k selector).

mod selection_trace;

use crate::error::{Error, Result};
use crate::model::{DenoiserModel, LinearLayer, LoraAdapter};
use crate::numerics::{
    cosine_similarity, kl_divergence, kl_divergence_logits, softmax_with_temperature,
    GradientTrace, Tensor, Var,
};

pub use selection_trace::{LayerFrequency, SelectionTrace};

/// How far an adapted feature moved away from the base feature.
///
/// Every criterion is oriented so that a larger value means a larger change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// `KL(softmax(f_hat) || softmax(f))`
    Kl,
    /// Jensen-Shannon divergence of the softmaxed features.
    Js,
    /// `1 - cos(f_hat, f)`
    Cosine,
    /// `-(f_hat . f)`
    Dot,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Kl,
        Criterion::Js,
        Criterion::Cosine,
        Criterion::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Kl => "kl",
            Criterion::Js => "js",
            Criterion::Cosine => "cosine",
            Criterion::Dot => "dot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown selection criterion '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionPolicy {
    BaseOnly,
    ContentOnly,
    StyleOnly,
    /// Every layer uses `W0 + content * dW_c + style * dW_s`.
    DirectMerge {
        content: f64,
        style: f64,
    },
    /// Input-adaptive per-layer branch selection.
    FeatureSelect(Criterion),
    /// Static per-layer choice by the summed top-k `|dW|` entries. `None`
    /// uses 1% of the layer's element count, at least 8.
    MagnitudeTopK {
        k: Option<usize>,
    },
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FusionPolicy::DirectMerge { content, style }
                if !(content.is_finite() && style.is_finite()) =>
            {
                Err(Error::Validation("merge weights must be finite".into()))
            }
            FusionPolicy::MagnitudeTopK { k: Some(0) } => {
                Err(Error::Validation("top-k needs k >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether the policy records per-layer choices in the selection trace.
    pub fn selects(&self) -> bool {
        matches!(
            self,
            FusionPolicy::FeatureSelect(_) | FusionPolicy::MagnitudeTopK { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            FusionPolicy::BaseOnly => "base".into(),
            FusionPolicy::ContentOnly => "content".into(),
            FusionPolicy::StyleOnly => "style".into(),
            FusionPolicy::DirectMerge { content, style } => format!("merge({content},{style})"),
            FusionPolicy::FeatureSelect(c) => format!("select-{}", c.name()),
            FusionPolicy::MagnitudeTopK { k: None } => "topk".into(),
            FusionPolicy::MagnitudeTopK { k: Some(k) } => format!("topk({k})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Choice {
    Content,
    Style,
}

impl Choice {
    pub fn code(self) -> char {
        match self {
            Choice::Content => 'C',
            Choice::Style => 'S',
        }
    }
}

/// One cell of the selection trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSelection {
    pub layer: usize,
    pub choice: Choice,
    pub d_c: f64,
    pub d_s: f64,
}

/// Base, content-adapted and style-adapted outputs of one layer (before the
/// activation) for the same incoming feature.
pub fn branch_features(
    layer: &LinearLayer,
    content: Option<&Tensor>,
    style: Option<&Tensor>,
    input: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let affine = |delta: Option<&Tensor>| -> Result<Tensor> {
        let w = match delta {
            Some(d) => layer.weight.add(d)?,
            None => layer.weight.clone(),
        };
        w.matmul(input)?.add(&layer.bias)
    };
    Ok((affine(None)?, affine(content)?, affine(style)?))
}

pub fn divergence(criterion: Criterion, f_hat: &Tensor, f: &Tensor) -> Result<f64> {
    divergence_with_temperature(criterion, f_hat, f, 1.0)
}

pub fn divergence_with_temperature(
    criterion: Criterion,
    f_hat: &Tensor,
    f: &Tensor,
    temperature: f64,
) -> Result<f64> {
    if f_hat.len() != f.len() {
        return Err(Error::Dimension(format!(
            "divergence: feature lengths {} and {} differ",
            f_hat.len(),
            f.len()
        )));
    }
    let f_hat = f_hat.flatten();
    let f = f.flatten();
    match criterion {
        Criterion::Kl => kl_divergence_logits(&f_hat, &f, temperature),
        Criterion::Js => {
            let p = softmax_with_temperature(&f_hat, temperature)?;
            let q = softmax_with_temperature(&f, temperature)?;
            let m = p.add(&q)?.scale(0.5)?;
            Ok(0.5 * kl_divergence(&p, &m)? + 0.5 * kl_divergence(&q, &m)?)
        }
        Criterion::Cosine => Ok(1.0 - cosine_similarity(&f_hat, &f)?),
        Criterion::Dot => Ok(-f_hat.dot(&f)?),
    }
}

/// Content when `d_c >= d_s`, otherwise style.
pub fn select_layer(d_c: f64, d_s: f64) -> Result<Choice> {
    if d_c.is_nan() || d_s.is_nan() {
        return Err(Error::Contract("selection on NaN divergence".into()));
    }
    Ok(if d_c >= d_s {
        Choice::Content
    } else {
        Choice::Style
    })
}

/// Averages per-sample `(d_c, d_s)` over a batch and selects once.
pub fn batch_decision(per_sample: &[(f64, f64)]) -> Result<(Choice, f64, f64)> {
    if per_sample.is_empty() {
        return Err(Error::Contract("batch decision over an empty batch".into()));
    }
    let n = per_sample.len() as f64;
    let d_c = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
    let d_s = per_sample.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((select_layer(d_c, d_s)?, d_c, d_s))
}

/// Sum of the `k` largest absolute entries.
pub fn top_k_magnitude(delta: &Tensor, k: usize) -> f64 {
    let mut mags: Vec<f64> = delta.data().iter().map(|v| v.abs()).collect();
    let k = k.min(mags.len());
    if k == 0 {
        return 0.0;
    }
    mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    mags[..k].iter().sum()
}

pub fn default_top_k(numel: usize) -> usize {
    (numel / 100).max(8)
}

#[derive(Clone, Debug)]
enum LayerPlan {
    Base,
    Fixed(Tensor),
    Select {
        content: Tensor,
        style: Tensor,
    },
    Static {
        weight: Tensor,
        record: LayerSelection,
    },
}

/// A denoiser bound to a base model, two adapters and a fusion policy.
///
/// Merged weight matrices are formed once at construction. The forward pass
/// runs on a [`GradientTrace`]; selections are made from values and enter the
/// trace only as the choice of which branch output to propagate.
#[derive(Clone, Debug)]
pub struct FusedDenoiser<'a> {
    model: &'a DenoiserModel,
    policy: FusionPolicy,
    temperature: f64,
    plans: Vec<LayerPlan>,
}

fn adapter_delta(adapter: Option<&LoraAdapter>, layer: usize, which: &str) -> Result<Tensor> {
    let adapter =
        adapter.ok_or_else(|| Error::Validation(format!("policy needs a {which} adapter")))?;
    adapter
        .get(layer)
        .ok_or_else(|| Error::Validation(format!("{which} adapter does not cover layer {layer}")))?
        .delta()
}

impl<'a> FusedDenoiser<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        content: Option<&LoraAdapter>,
        style: Option<&LoraAdapter>,
        policy: FusionPolicy,
    ) -> Result<Self> {
        Self::with_temperature(model, content, style, policy, 1.0)
    }

    pub fn with_temperature(
        model: &'a DenoiserModel,
        content: Option<&LoraAdapter>,
        style: Option<&LoraAdapter>,
        policy: FusionPolicy,
        temperature: f64,
    ) -> Result<Self> {
        policy.validate()?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        for a in [content, style].into_iter().flatten() {
            a.validate_against(model)?;
        }
        let mut plans = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            if !model.is_adapted(i) {
                plans.push(LayerPlan::Base);
                continue;
            }
            let w0 = &layer.weight;
            let plan = match policy {
                FusionPolicy::BaseOnly => LayerPlan::Base,
                FusionPolicy::ContentOnly => {
                    LayerPlan::Fixed(w0.add(&adapter_delta(content, i, "content")?)?)
                }
                FusionPolicy::StyleOnly => {
                    LayerPlan::Fixed(w0.add(&adapter_delta(style, i, "style")?)?)
                }
                FusionPolicy::DirectMerge {
                    content: lc,
                    style: ls,
                } => LayerPlan::Fixed(
                    w0.axpy(lc, &adapter_delta(content, i, "content")?)?
                        .axpy(ls, &adapter_delta(style, i, "style")?)?,
                ),
                FusionPolicy::FeatureSelect(_) => LayerPlan::Select {
                    content: w0.add(&adapter_delta(content, i, "content")?)?,
                    style: w0.add(&adapter_delta(style, i, "style")?)?,
                },
                FusionPolicy::MagnitudeTopK { k } => {
                    let dc = adapter_delta(content, i, "content")?;
                    let ds = adapter_delta(style, i, "style")?;
                    let k = k.unwrap_or_else(|| default_top_k(dc.len()));
                    let d_c = top_k_magnitude(&dc, k);
                    let d_s = top_k_magnitude(&ds, k);
                    let choice = select_layer(d_c, d_s)?;
                    let delta = if choice == Choice::Content { dc } else { ds };
                    LayerPlan::Static {
                        weight: w0.add(&delta)?,
                        record: LayerSelection {
                            layer: i,
                            choice,
                            d_c,
                            d_s,
                        },
                    }
                }
            };
            plans.push(plan);
        }
        Ok(Self {
            model,
            policy,
            temperature,
            plans,
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        self.model
    }

    pub fn policy(&self) -> FusionPolicy {
        self.policy
    }

    /// Epsilon prediction for a `[D, batch]` latent on `tr`.
    ///
    /// With `frozen` set, selecting layers reuse the given choices instead of
    /// recomputing them; only the chosen branch is evaluated.
    pub fn forward(
        &self,
        tr: &mut GradientTrace,
        x: Var,
        ts: &[usize],
        frozen: Option<&[LayerSelection]>,
    ) -> Result<(Var, Vec<LayerSelection>)> {
        let mut h = self.model.embed_input(tr, x, ts)?;
        let mut row = Vec::new();
        for (i, (layer, plan)) in self.model.layers.iter().zip(&self.plans).enumerate() {
            let bias = tr.constant(layer.bias.clone());
            let pre = match plan {
                LayerPlan::Base => affine(tr, &layer.weight, bias, h)?,
                LayerPlan::Fixed(w) => affine(tr, w, bias, h)?,
                LayerPlan::Static { weight, record } => {
                    row.push(*record);
                    affine(tr, weight, bias, h)?
                }
                LayerPlan::Select { content, style } => {
                    if let Some(frozen) = frozen {
                        let record = *frozen.iter().find(|s| s.layer == i).ok_or_else(|| {
                            Error::Contract(format!("frozen selection lacks layer {i}"))
                        })?;
                        row.push(record);
                        let w = match record.choice {
                            Choice::Content => content,
                            Choice::Style => style,
                        };
                        affine(tr, w, bias, h)?
                    } else {
                        let base = affine(tr, &layer.weight, bias, h)?;
                        let fc = affine(tr, content, bias, h)?;
                        let fs = affine(tr, style, bias, h)?;
                        let record = self.decide(tr, i, base, fc, fs)?;
                        row.push(record);
                        match record.choice {
                            Choice::Content => fc,
                            Choice::Style => fs,
                        }
                    }
                }
            };
            h = self.model.activate(tr, i, pre)?;
        }
        Ok((self.model.skip(tr, x, h)?, row))
    }

    fn decide(
        &self,
        tr: &GradientTrace,
        layer: usize,
        base: Var,
        fc: Var,
        fs: Var,
    ) -> Result<LayerSelection> {
        let FusionPolicy::FeatureSelect(criterion) = self.policy else {
            unreachable!("selection plan only built for feature selection");
        };
        let (base, fc, fs) = (tr.value(base)?, tr.value(fc)?, tr.value(fs)?);
        let (_, batch) = base.dims2()?;
        let mut per_sample = Vec::with_capacity(batch);
        for j in 0..batch {
            let f = base.column_at(j)?;
            let d_c =
                divergence_with_temperature(criterion, &fc.column_at(j)?, &f, self.temperature)?;
            let d_s =
                divergence_with_temperature(criterion, &fs.column_at(j)?, &f, self.temperature)?;
            per_sample.push((d_c, d_s));
        }
        let (choice, d_c, d_s) = batch_decision(&per_sample)?;
        Ok(LayerSelection {
            layer,
            choice,
            d_c,
            d_s,
        })
    }

    /// Value-only epsilon prediction for a single latent.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<(Tensor, Vec<LayerSelection>)> {
        self.predict_frozen(x_t, t, None)
    }

    pub fn predict_frozen(
        &self,
        x_t: &Tensor,
        t: usize,
        frozen: Option<&[LayerSelection]>,
    ) -> Result<(Tensor, Vec<LayerSelection>)> {
        let mut tr = GradientTrace::inactive();
        let x = tr.constant(x_t.reshape(vec![x_t.len(), 1])?);
        let (eps, row) = self.forward(&mut tr, x, &[t], frozen)?;
        Ok((tr.value(eps)?.flatten(), row))
    }
}

fn affine(tr: &mut GradientTrace, w: &Tensor, bias: Var, h: Var) -> Result<Var> {
    let w = tr.constant(w.clone());
    let y = tr.matmul(w, h)?;
    tr.add_bias(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSource;
    use crate::model::{LoraLayer, ModelConfig};

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            hidden: vec![12, 12],
            time_embed_dim: 4,
            adapted_layers: None,
        }
    }

    /// Adapter with nonzero up-projections.
    pub(crate) fn random_adapter(
        model: &DenoiserModel,
        rank: usize,
        seed: u64,
        std: f64,
    ) -> LoraAdapter {
        let mut n = NoiseSource::new(seed);
        let mut a = LoraAdapter::default();
        for i in model.adapted_layer_indices() {
            let l = &model.layers[i];
            let down = n.normal_tensor(&[rank, l.in_dim()], std).unwrap();
            let up = n.normal_tensor(&[l.out_dim(), rank], std).unwrap();
            a.layers
                .insert(i, LoraLayer::new(down, up, rank as f64).unwrap());
        }
        a
    }

    fn vecn(seed: u64, n: usize) -> Tensor {
        NoiseSource::new(seed).normal_tensor(&[n], 1.0).unwrap()
    }

    #[test]
    fn branch_feature_examples() {
        let model = DenoiserModel::random(&config(), 1).unwrap();
        let layer = &model.layers[1];
        let x = vecn(2, 12);
        let zero = Tensor::zeros(&[12, 12]);
        let (f, fc, fs) = branch_features(layer, Some(&zero), Some(&zero), &x).unwrap();
        assert_eq!(f, fc);
        assert_eq!(f, fs);

        let style = random_adapter(&model, 2, 3, 0.5);
        let ds = style.get(1).unwrap().delta().unwrap();
        let (f, fc, fs) = branch_features(layer, Some(&zero), Some(&ds), &x).unwrap();
        assert_eq!(f, fc);
        assert!(f.max_abs_diff(&fs) > 1e-6);

        // three independent products
        let mut expect_s = vec![0.0; 12];
        for (r, e) in expect_s.iter_mut().enumerate() {
            *e = layer.bias.data()[r];
            for c in 0..12 {
                *e += (layer.weight.data()[r * 12 + c] + ds.data()[r * 12 + c]) * x.data()[c];
            }
        }
        for (a, b) in fs.data().iter().zip(&expect_s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_examples() {
        let f = vecn(4, 6);
        for c in [Criterion::Kl, Criterion::Js, Criterion::Cosine] {
            assert!(divergence(c, &f, &f).unwrap().abs() < 1e-15, "{c:?}");
        }
        let shifted = f.map(|v| v + 2.5, "shift").unwrap();
        assert!(divergence(Criterion::Kl, &shifted, &f).unwrap().abs() < 1e-12);

        // softmax-then-sum oracle, 4 dims
        let a = [0.3, -1.1, 0.8, 2.0];
        let b = [-0.4, 0.2, 1.5, 0.1];
        let sm = |x: &[f64]| {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let (p, q) = (sm(&a), sm(&b));
        let oracle: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        let got = divergence(
            Criterion::Kl,
            &Tensor::vector(a.to_vec()).unwrap(),
            &Tensor::vector(b.to_vec()).unwrap(),
        )
        .unwrap();
        assert!((got - oracle).abs() < 1e-12);

        let zero = Tensor::zeros(&[6]);
        assert!(matches!(
            divergence(Criterion::Cosine, &zero, &f),
            Err(Error::Degenerate(_))
        ));
        let dot = divergence(Criterion::Dot, &f, &f).unwrap();
        assert!((dot + f.norm().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn js_is_symmetric_and_bounded() {
        let a = vecn(5, 10);
        let b = vecn(6, 10);
        let ab = divergence(Criterion::Js, &a, &b).unwrap();
        let ba = divergence(Criterion::Js, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0 && ab <= std::f64::consts::LN_2);
    }

    #[test]
    fn select_layer_rules() {
        assert_eq!(select_layer(0.25, 0.25).unwrap(), Choice::Content);
        assert_eq!(select_layer(0.0, 0.1).unwrap(), Choice::Style);
        assert_eq!(select_layer(0.1, 0.0).unwrap(), Choice::Content);
        assert!(matches!(
            select_layer(f64::NAN, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_decision_rules() {
        assert_eq!(
            batch_decision(&[(0.3, 0.1)]).unwrap().0,
            select_layer(0.3, 0.1).unwrap()
        );
        assert_eq!(
            batch_decision(&[(0.05, 0.2); 5]).unwrap().0,
            select_layer(0.05, 0.2).unwrap()
        );
        let (choice, d_c, d_s) = batch_decision(&[(0.2, 0.1), (0.0, 0.3)]).unwrap();
        assert!((d_c - 0.1).abs() < 1e-15 && (d_s - 0.2).abs() < 1e-15);
        assert_eq!(choice, Choice::Style);
        assert!(matches!(batch_decision(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_style_adapter_degenerates_to_content_only() {
        let model = DenoiserModel::random(&config(), 7).unwrap();
        let content = random_adapter(&model, 2, 8, 0.4);
        let style = LoraAdapter::zeros(&model, 2).unwrap();
        let select = FusedDenoiser::new(
            &model,
            Some(&content),
            Some(&style),
            FusionPolicy::FeatureSelect(Criterion::Kl),
        )
        .unwrap();
        let only = FusedDenoiser::new(
            &model,
            Some(&content),
            Some(&style),
            FusionPolicy::ContentOnly,
        )
        .unwrap();
        for seed in 0..10 {
            let x = vecn(100 + seed, 8);
            let (e1, row) = select.predict(&x, 40 * seed as usize).unwrap();
            let (e2, empty) = only.predict(&x, 40 * seed as usize).unwrap();
            assert_eq!(e1, e2);
            assert!(empty.is_empty());
            assert_eq!(row.len(), 3);
            for s in row {
                assert_eq!(s.d_s, 0.0);
                assert_eq!(s.choice, Choice::Content);
            }
        }
    }

    #[test]
    fn merge_degenerates_to_single_adapter() {
        let model = DenoiserModel::random(&config(), 9).unwrap();
        let c = random_adapter(&model, 2, 10, 0.3);
        let s = random_adapter(&model, 2, 11, 0.3);
        let merge = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::DirectMerge {
                content: 1.0,
                style: 0.0,
            },
        )
        .unwrap();
        let only =
            FusedDenoiser::new(&model, Some(&c), Some(&s), FusionPolicy::ContentOnly).unwrap();
        let x = vecn(12, 8);
        let (a, _) = merge.predict(&x, 500).unwrap();
        let (b, _) = only.predict(&x, 500).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    /// Re-derives each choice layer by layer with plain tensor arithmetic.
    #[test]
    fn selections_match_layerwise_reevaluation() {
        let model = DenoiserModel::random(&config(), 13).unwrap();
        let c = random_adapter(&model, 2, 14, 0.5);
        let s = random_adapter(&model, 2, 15, 0.5);
        let fused = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::FeatureSelect(Criterion::Kl),
        )
        .unwrap();
        let mut styles = 0;
        for seed in 0..8 {
            let x = vecn(200 + seed, 8);
            let t = 125 * seed as usize;
            let (eps, row) = fused.predict(&x, t).unwrap();

            let mut h = x.to_vec();
            h.extend(crate::model::time_embedding(t, 4).unwrap().data());
            let mut h = Tensor::vector(h).unwrap();
            for (i, layer) in model.layers.iter().enumerate() {
                let dc = c.get(i).unwrap().delta().unwrap();
                let ds = s.get(i).unwrap().delta().unwrap();
                let (f, fc, fs) = branch_features(layer, Some(&dc), Some(&ds), &h).unwrap();
                let d_c = divergence(Criterion::Kl, &fc, &f).unwrap();
                let d_s = divergence(Criterion::Kl, &fs, &f).unwrap();
                let choice = select_layer(d_c, d_s).unwrap();
                assert_eq!(row[i].choice, choice);
                assert!((row[i].d_c - d_c).abs() < 1e-12);
                styles += usize::from(choice == Choice::Style);
                let chosen = if choice == Choice::Content { fc } else { fs };
                h = if i + 1 < model.layers.len() {
                    crate::numerics::silu(&chosen).unwrap()
                } else {
                    chosen
                };
            }
            assert!(h.add(&x).unwrap().max_abs_diff(&eps) < 1e-12);
        }
        assert!(styles > 0, "fixture never exercised the style branch");
    }

    #[test]
    fn frozen_selection_reproduces_live_pass() {
        let model = DenoiserModel::random(&config(), 16).unwrap();
        let c = random_adapter(&model, 2, 17, 0.5);
        let s = random_adapter(&model, 2, 18, 0.5);
        let fused = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::FeatureSelect(Criterion::Js),
        )
        .unwrap();
        let x = vecn(19, 8);
        let (live, row) = fused.predict(&x, 300).unwrap();
        let (frozen, row2) = fused.predict_frozen(&x, 300, Some(&row)).unwrap();
        assert_eq!(live, frozen);
        assert_eq!(row, row2);
    }

    #[test]
    fn topk_is_input_independent() {
        let model = DenoiserModel::random(&config(), 20).unwrap();
        let c = random_adapter(&model, 2, 21, 0.5);
        let s = random_adapter(&model, 2, 22, 0.6);
        let fused = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::MagnitudeTopK { k: None },
        )
        .unwrap();
        let (_, r1) = fused.predict(&vecn(23, 8), 10).unwrap();
        let (_, r2) = fused.predict(&vecn(24, 8), 900).unwrap();
        assert_eq!(r1, r2);
        for sel in &r1 {
            let k = default_top_k(model.layers[sel.layer].weight.len());
            assert_eq!(k, 8);
            let oracle = |a: &LoraAdapter| {
                let mut v: Vec<f64> = a
                    .get(sel.layer)
                    .unwrap()
                    .delta()
                    .unwrap()
                    .data()
                    .iter()
                    .map(|x| x.abs())
                    .collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                v[..k].iter().sum::<f64>()
            };
            assert!((sel.d_c - oracle(&c)).abs() < 1e-12);
            assert!((sel.d_s - oracle(&s)).abs() < 1e-12);
        }
    }

    /// Two inputs on which selection disagrees while Top-K cannot.
    #[test]
    fn pinned_input_adaptivity_witness() {
        let model = DenoiserModel::random(&config(), 13).unwrap();
        let c = random_adapter(&model, 2, 14, 0.5);
        let s = random_adapter(&model, 2, 15, 0.5);
        let kl = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::FeatureSelect(Criterion::Kl),
        )
        .unwrap();
        let topk = FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&s),
            FusionPolicy::MagnitudeTopK { k: None },
        )
        .unwrap();
        let codes =
            |row: &[LayerSelection]| row.iter().map(|r| r.choice.code()).collect::<String>();
        let (x1, x2) = (vecn(200, 8), vecn(205, 8));
        assert_eq!(codes(&kl.predict(&x1, 500).unwrap().1), "SSC");
        assert_eq!(codes(&kl.predict(&x2, 500).unwrap().1), "CCS");
        assert_eq!(
            topk.predict(&x1, 500).unwrap().1,
            topk.predict(&x2, 500).unwrap().1
        );
    }

    #[test]
    fn missing_adapters_are_rejected() {
        let model = DenoiserModel::random(&config(), 25).unwrap();
        let c = random_adapter(&model, 2, 26, 0.5);
        assert!(FusedDenoiser::new(&model, None, None, FusionPolicy::BaseOnly).is_ok());
        assert!(FusedDenoiser::new(
            &model,
            Some(&c),
            None,
            FusionPolicy::FeatureSelect(Criterion::Kl)
        )
        .is_err());
        assert!(FusedDenoiser::new(
            &model,
            Some(&c),
            Some(&c),
            FusionPolicy::MagnitudeTopK { k: Some(0) }
        )
        .is_err());
    }

    #[test]
    fn permuting_features_preserves_divergences() {
        let f = vecn(30, 9);
        let fc = vecn(31, 9);
        let fs = vecn(32, 9);
        let perm = [4usize, 0, 8, 2, 6, 1, 7, 3, 5];
        let p = |t: &Tensor| Tensor::vector(perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        for crit in Criterion::ALL {
            let d_c = divergence(crit, &fc, &f).unwrap();
            let d_s = divergence(crit, &fs, &f).unwrap();
            let pd_c = divergence(crit, &p(&fc), &p(&f)).unwrap();
            let pd_s = divergence(crit, &p(&fs), &p(&f)).unwrap();
            assert!((d_c - pd_c).abs() < 1e-12 && (d_s - pd_s).abs() < 1e-12);
            assert_eq!(
                select_layer(d_c, d_s).unwrap(),
                select_layer(pd_c, pd_s).unwrap()
            );
        }
    }
}
