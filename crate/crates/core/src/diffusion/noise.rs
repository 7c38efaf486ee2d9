use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::Tensor;

/// Seeded Gaussian noise.
///
/// Algorithm, so other implementations can reproduce a trajectory:
///
/// 1. the generator is ChaCha with 8 rounds, keyed by `seed_from_u64(seed)`
///    (the seed is expanded to 32 bytes with PCG32, as in `rand_core` 0.6);
/// 2. a uniform draw is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
/// 3. normals come in Box-Muller pairs from two uniforms `u1, u2`:
///    `r = sqrt(-2 ln(1 - u1))`, first `r cos(2 pi u2)`, then `r sin(2 pi u2)`.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }
}
