//! Reference-driven correction of the denoising trajectory.
//!
//! After each deterministic step the latent is nudged against the gradient of
//! a residual `R = 1 - (S1 + S2 + S3) / 3`, where the three scores compare the
//! current clean-image estimate with a content reference and a style
//! reference under two encoders.

mod encoder;

use std::path::Path;

use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusedDenoiser, FusionPolicy, LayerSelection};
use crate::model::{load_weights, DenoiserModel, LoraAdapter, NamedTensors};
use crate::numerics::{GradientTrace, Tensor, Var};

pub use encoder::{
    EncoderKind, MetricEncoder, CONTENT_SEED, EMBED_DIM, PATCH, STYLE_SEED, VARIANCE_FLOOR,
};

pub const DEFAULT_SCALE: f64 = 10.0;

pub const KEY_CONTENT_REF: &str = "ref_content.content";
pub const KEY_STYLE_REF_CONTENT: &str = "ref_style.content";
pub const KEY_STYLE_REF_STYLE: &str = "ref_style.style";

/// The three similarities entering the residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    /// content encoder, content reference
    pub s1: f64,
    /// content encoder, style reference
    pub s2: f64,
    /// style encoder, style reference
    pub s3: f64,
}

impl Scores {
    pub fn combined(&self) -> f64 {
        (self.s1 + self.s2 + self.s3) / 3.0
    }

    pub fn residual(&self) -> f64 {
        1.0 - self.combined()
    }
}

#[derive(Clone, Debug)]
struct RefEmbeddings {
    content_ref_content: Tensor,
    style_ref_content: Tensor,
    style_ref_style: Tensor,
}

#[derive(Clone, Debug)]
pub struct GuidanceContext {
    pub ref_content: Option<Tensor>,
    pub ref_style: Option<Tensor>,
    content_encoder: MetricEncoder,
    style_encoder: MetricEncoder,
    refs: RefEmbeddings,
    m: f64,
    stride: usize,
}

fn check_scale(m: f64, stride: usize) -> Result<()> {
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::Validation(format!(
            "guidance scale must be >= 0, got {m}"
        )));
    }
    if stride == 0 {
        return Err(Error::Validation("guidance stride must be >= 1".into()));
    }
    Ok(())
}

fn unit(t: &Tensor, name: &str) -> Result<Tensor> {
    if t.len() != EMBED_DIM {
        return Err(Error::format(
            Some(name),
            format!("embedding has {} entries, expected {EMBED_DIM}", t.len()),
        ));
    }
    let n = t.norm();
    if n == 0.0 {
        return Err(Error::Degenerate(format!(
            "embedding '{name}' has zero norm"
        )));
    }
    t.flatten().scale(1.0 / n)
}

impl GuidanceContext {
    /// Context with the default seeded encoders.
    pub fn new(ref_content: Tensor, ref_style: Tensor, m: f64) -> Result<Self> {
        let d = ref_content.len();
        Self::with_encoders(
            ref_content,
            ref_style,
            MetricEncoder::content(d, CONTENT_SEED)?,
            MetricEncoder::style(d, STYLE_SEED)?,
            m,
        )
    }

    pub fn with_encoders(
        ref_content: Tensor,
        ref_style: Tensor,
        content_encoder: MetricEncoder,
        style_encoder: MetricEncoder,
        m: f64,
    ) -> Result<Self> {
        check_scale(m, 1)?;
        if ref_content.len() != ref_style.len() {
            return Err(Error::Dimension("references differ in size".into()));
        }
        let refs = RefEmbeddings {
            content_ref_content: content_encoder.embed(&ref_content)?,
            style_ref_content: content_encoder.embed(&ref_style)?,
            style_ref_style: style_encoder.embed(&ref_style)?,
        };
        Ok(Self {
            ref_content: Some(ref_content),
            ref_style: Some(ref_style),
            content_encoder,
            style_encoder,
            refs,
            m,
            stride: 1,
        })
    }

    /// Context from precomputed reference embeddings, which are normalized on
    /// import. The encoders are still used on the generated image.
    pub fn from_embeddings(
        named: &NamedTensors,
        content_encoder: MetricEncoder,
        style_encoder: MetricEncoder,
        m: f64,
    ) -> Result<Self> {
        check_scale(m, 1)?;
        let get = |k: &str| -> Result<Tensor> {
            let t = named
                .get(k)
                .ok_or_else(|| Error::format(Some(k), "missing embedding"))?;
            unit(t, k)
        };
        Ok(Self {
            ref_content: None,
            ref_style: None,
            refs: RefEmbeddings {
                content_ref_content: get(KEY_CONTENT_REF)?,
                style_ref_content: get(KEY_STYLE_REF_CONTENT)?,
                style_ref_style: get(KEY_STYLE_REF_STYLE)?,
            },
            content_encoder,
            style_encoder,
            m,
            stride: 1,
        })
    }

    pub fn load_embeddings(path: impl AsRef<Path>, input_dim: usize, m: f64) -> Result<Self> {
        Self::from_embeddings(
            &load_weights(path)?,
            MetricEncoder::content(input_dim, CONTENT_SEED)?,
            MetricEncoder::style(input_dim, STYLE_SEED)?,
            m,
        )
    }

    pub fn embeddings(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        out.insert(
            KEY_CONTENT_REF.into(),
            self.refs.content_ref_content.clone(),
        );
        out.insert(
            KEY_STYLE_REF_CONTENT.into(),
            self.refs.style_ref_content.clone(),
        );
        out.insert(
            KEY_STYLE_REF_STYLE.into(),
            self.refs.style_ref_style.clone(),
        );
        out
    }

    pub fn with_scale(mut self, m: f64) -> Result<Self> {
        check_scale(m, self.stride)?;
        self.m = m;
        Ok(self)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        check_scale(self.m, stride)?;
        self.stride = stride;
        Ok(self)
    }

    pub fn scale(&self) -> f64 {
        self.m
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Whether the `k`-th sampling step (0-based) is corrected.
    pub fn applies_at(&self, k: usize) -> bool {
        k % self.stride == 0
    }

    pub fn content_encoder(&self) -> &MetricEncoder {
        &self.content_encoder
    }

    pub fn style_encoder(&self) -> &MetricEncoder {
        &self.style_encoder
    }

    pub fn scores(&self, x0: &Tensor) -> Result<Scores> {
        let ec = self.content_encoder.embed(x0)?;
        let es = self.style_encoder.embed(x0)?;
        Ok(Scores {
            s1: crate::numerics::cosine_similarity(&self.refs.content_ref_content, &ec)?,
            s2: crate::numerics::cosine_similarity(&self.refs.style_ref_content, &ec)?,
            s3: crate::numerics::cosine_similarity(&self.refs.style_ref_style, &es)?,
        })
    }

    /// Same arithmetic as [`residual_var`](Self::residual_var), value only.
    pub fn residual(&self, x0: &Tensor) -> Result<f64> {
        let mut tr = GradientTrace::inactive();
        let x = tr.constant(x0.reshape(vec![x0.len(), 1])?);
        let r = self.residual_var(&mut tr, x)?;
        tr.value(r)?.item()
    }

    /// Traced residual of a `[D, 1]` clean-image estimate.
    pub fn residual_var(&self, tr: &mut GradientTrace, x0: Var) -> Result<Var> {
        let ec = self.content_encoder.embed_var(tr, x0)?;
        let es = self.style_encoder.embed_var(tr, x0)?;
        let col = |t: &Tensor| t.reshape(vec![EMBED_DIM, 1]);
        let r1 = tr.constant(col(&self.refs.content_ref_content)?);
        let r2 = tr.constant(col(&self.refs.style_ref_content)?);
        let r3 = tr.constant(col(&self.refs.style_ref_style)?);
        // all embeddings are unit-norm, so cosine reduces to a dot product
        let s1 = tr.dot(r1, ec)?;
        let s2 = tr.dot(r2, ec)?;
        let s3 = tr.dot(r3, es)?;
        let s = tr.add(s1, s2)?;
        let s = tr.add(s, s3)?;
        let s = tr.scale(s, -1.0 / 3.0)?;
        tr.add_scalar(s, 1.0)
    }
}

/// Content and style reference images for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    pub content: Tensor,
    pub style: Tensor,
    pub seed: u64,
}

/// Samples the content reference with the content adapter alone and the
/// style reference with the style adapter alone, both unguided.
pub fn generate_references(
    model: &DenoiserModel,
    content: &LoraAdapter,
    style: &LoraAdapter,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<References> {
    let c = FusedDenoiser::new(model, Some(content), Some(style), FusionPolicy::ContentOnly)?;
    let s = FusedDenoiser::new(model, Some(content), Some(style), FusionPolicy::StyleOnly)?;
    Ok(References {
        content: sample(&c, schedule, None, config)?.image,
        style: sample(&s, schedule, None, config)?.image,
        seed: config.seed,
    })
}

/// Outcome of one corrected step.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub x_prev: Tensor,
    /// The uncorrected deterministic step.
    pub x_ori: Tensor,
    pub eps: Tensor,
    pub gradient: Tensor,
    pub residual: f64,
    pub selections: Vec<LayerSelection>,
}

/// One denoising step followed by `x_prev = x_ori - m * dR/dx_t`.
///
/// Selections are made once, from values, and act as constants during the
/// backward sweep. `step` is only used to label failures.
pub fn guided_step(
    ctx: &GuidanceContext,
    fused: &FusedDenoiser<'_>,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    step: usize,
) -> Result<GuidedStep> {
    let fail = |message: String| Error::Numeric { step, message };
    let d = x_t.len();
    let mut tr = GradientTrace::new();
    let xv = tr.input(x_t.reshape(vec![d, 1])?);
    let (eps_v, selections) = fused.forward(&mut tr, xv, &[t], None)?;
    let x0 = schedule.predict_x0_var(&mut tr, xv, eps_v, t)?;
    let r = ctx
        .residual_var(&mut tr, x0)
        .map_err(|e| fail(format!("residual evaluation failed: {e}")))?;
    let residual = tr.value(r)?.item()?;
    let gradient = tr
        .gradient(r, xv)
        .map_err(|e| fail(format!("gradient failed (R = {residual}): {e}")))?
        .flatten();
    let eps = tr.value(eps_v)?.flatten();
    let x_ori = schedule.ddim_step(x_t, &eps, t, t_prev)?;
    let x_prev = if ctx.m == 0.0 {
        x_ori.clone()
    } else {
        x_ori.axpy(-ctx.m, &gradient).map_err(|e| {
            fail(format!(
                "corrected latent is not finite (R = {residual}, |g| = {}): {e}",
                gradient.norm()
            ))
        })?
    };
    Ok(GuidedStep {
        x_prev,
        x_ori,
        eps,
        gradient,
        residual,
        selections,
    })
}

/// `R(x0_hat(x_t))` with the given selections held fixed.
pub fn frozen_residual(
    ctx: &GuidanceContext,
    fused: &FusedDenoiser<'_>,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    selections: &[LayerSelection],
) -> Result<f64> {
    let frozen = fused.policy().selects().then_some(selections);
    let (eps, _) = fused.predict_frozen(x_t, t, frozen)?;
    ctx.residual(&schedule.predict_x0(x_t, &eps, t)?)
}
