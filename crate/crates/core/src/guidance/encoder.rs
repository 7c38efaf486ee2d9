use crate::diffusion::NoiseSource;
use crate::error::{Error, Result};
use crate::numerics::{GradientTrace, Tensor, Var};

pub const EMBED_DIM: usize = 32;
pub const PATCH: usize = 4;
pub const CONTENT_SEED: u64 = 0xC0_27E7;
pub const STYLE_SEED: u64 = 0x57_1E;
/// Added to patch variances so the square root stays differentiable.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Content,
    Style,
}

/// Seeded projection encoder producing unit-norm embeddings.
///
/// The content encoder projects raw pixels. The style encoder first reduces
/// the image to per-patch means and standard deviations over 4×4 tiles, so it
/// responds to local texture rather than to where things are.
#[derive(Clone, Debug)]
pub struct MetricEncoder {
    kind: EncoderKind,
    input_dim: usize,
    projection: Tensor,
    pool: Option<Tensor>,
}

impl MetricEncoder {
    pub fn content(input_dim: usize, seed: u64) -> Result<Self> {
        let projection = NoiseSource::new(seed)
            .normal_tensor(&[EMBED_DIM, input_dim], 1.0 / (input_dim as f64).sqrt())?;
        Ok(Self {
            kind: EncoderKind::Content,
            input_dim,
            projection,
            pool: None,
        })
    }

    pub fn style(input_dim: usize, seed: u64) -> Result<Self> {
        let side = crate::diffusion::square_side(input_dim)?;
        if side % PATCH != 0 {
            return Err(Error::Validation(format!(
                "style encoder needs a side divisible by {PATCH}, got {side}"
            )));
        }
        let per_row = side / PATCH;
        let patches = per_row * per_row;
        let mut pool = vec![0.0; patches * input_dim];
        for r in 0..side {
            for c in 0..side {
                let p = (r / PATCH) * per_row + c / PATCH;
                pool[p * input_dim + r * side + c] = 1.0 / (PATCH * PATCH) as f64;
            }
        }
        let features = 2 * patches;
        let projection = NoiseSource::new(seed)
            .normal_tensor(&[EMBED_DIM, features], 1.0 / (features as f64).sqrt())?;
        Ok(Self {
            kind: EncoderKind::Style,
            input_dim,
            projection,
            pool: Some(Tensor::matrix(patches, input_dim, pool)?),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Embeds a `[D, 1]` image on the trace; the result is `[EMBED_DIM, 1]`.
    pub fn embed_var(&self, tr: &mut GradientTrace, x: Var) -> Result<Var> {
        let d = tr.value(x)?.len();
        if d != self.input_dim {
            return Err(Error::Dimension(format!(
                "encoder expects {} pixels, got {d}",
                self.input_dim
            )));
        }
        let x = tr.reshape(x, vec![d, 1])?;
        let features = match &self.pool {
            None => x,
            Some(pool) => {
                let pool = tr.constant(pool.clone());
                let mean = tr.matmul(pool, x)?;
                let sq = tr.mul(x, x)?;
                let mean_sq = tr.matmul(pool, sq)?;
                let mean2 = tr.mul(mean, mean)?;
                let var = tr.sub(mean_sq, mean2)?;
                let var = tr.add_scalar(var, VARIANCE_FLOOR)?;
                let std = tr.sqrt(var)?;
                tr.concat_rows(mean, std)?
            }
        };
        let proj = tr.constant(self.projection.clone());
        let e = tr.matmul(proj, features)?;
        tr.normalize(e)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tr = GradientTrace::inactive();
        let v = tr.constant(x.clone());
        let e = self.embed_var(&mut tr, v)?;
        Ok(tr.value(e)?.flatten())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        NoiseSource::new(seed).normal_tensor(&[256], 0.5).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let c = MetricEncoder::content(256, CONTENT_SEED).unwrap();
        let s = MetricEncoder::style(256, STYLE_SEED).unwrap();
        for seed in 0..5 {
            assert!((c.embed(&image(seed)).unwrap().norm() - 1.0).abs() < 1e-12);
            assert!((s.embed(&image(seed)).unwrap().norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            c.embed(&Tensor::zeros(&[256])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn style_features_match_direct_patch_statistics() {
        let s = MetricEncoder::style(256, STYLE_SEED).unwrap();
        let x = image(9);
        let mut feats = vec![0.0; 32];
        for p in 0..16 {
            let (pr, pc) = (p / 4, p % 4);
            let px: Vec<f64> = (0..16)
                .map(|k| x.data()[(pr * 4 + k / 4) * 16 + pc * 4 + k % 4])
                .collect();
            let mean = px.iter().sum::<f64>() / 16.0;
            let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            feats[p] = mean;
            feats[16 + p] = (var + VARIANCE_FLOOR).sqrt();
        }
        let e = s
            .projection
            .matmul(&Tensor::vector(feats).unwrap())
            .unwrap();
        let e = e.scale(1.0 / e.norm()).unwrap();
        assert!(e.max_abs_diff(&s.embed(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn style_encoder_ignores_patch_placement() {
        let s = MetricEncoder::style(256, STYLE_SEED).unwrap();
        let x = image(3);
        // swapping pixels within one patch leaves its mean and std alone
        let mut y = x.to_vec();
        y.swap(0, 17);
        let y = Tensor::vector(y).unwrap();
        assert!(s.embed(&x).unwrap().max_abs_diff(&s.embed(&y).unwrap()) < 1e-12);
        let c = MetricEncoder::content(256, CONTENT_SEED).unwrap();
        assert!(c.embed(&x).unwrap().max_abs_diff(&c.embed(&y).unwrap()) > 1e-6);
    }

    #[test]
    fn style_encoder_needs_square_patched_images() {
        assert!(MetricEncoder::style(250, 1).is_err());
        assert!(MetricEncoder::style(36, 1).is_err());
        assert!(MetricEncoder::style(64, 1).is_ok());
    }
}
