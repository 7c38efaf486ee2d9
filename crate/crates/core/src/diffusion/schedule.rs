use crate::error::{Error, Result};
use crate::numerics::{GradientTrace, Tensor, Var};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Validation(format!(
                "schedule needs at least 2 steps, got {train_steps}"
            )));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Validation(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (train_steps - 1) as f64;
        let betas: Vec<f64> = (0..train_steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / span)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Contract(format!(
                "timestep {t} outside schedule of {} steps",
                self.train_steps()
            ))
        })
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        x0.scale(ab.sqrt())?.axpy((1.0 - ab).sqrt(), noise)
    }

    /// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`, unclipped.
    pub fn predict_x0(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        x_t.axpy(-(1.0 - ab).sqrt(), eps)?.scale(1.0 / ab.sqrt())
    }

    /// Traced counterpart of [`predict_x0`](Self::predict_x0).
    pub fn predict_x0_var(
        &self,
        tr: &mut GradientTrace,
        x_t: Var,
        eps: Var,
        t: usize,
    ) -> Result<Var> {
        let ab = self.alpha_bar(t)?;
        let noise_part = tr.scale(eps, (1.0 - ab).sqrt())?;
        let diff = tr.sub(x_t, noise_part)?;
        tr.scale(diff, 1.0 / ab.sqrt())
    }

    /// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
    ///
    /// `t_prev = None` is the final step, taken to `abar = 1`; it returns the
    /// clean-image estimate.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor> {
        let x0 = self.predict_x0(x_t, eps, t)?;
        let ab_prev = match t_prev {
            Some(tp) if tp >= t => {
                return Err(Error::Contract(format!(
                    "DDIM step must go backwards in time, got {t} -> {tp}"
                )))
            }
            Some(tp) => self.alpha_bar(tp)?,
            None => 1.0,
        };
        x0.scale(ab_prev.sqrt())?.axpy((1.0 - ab_prev).sqrt(), eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSource;

    fn rand_vec(seed: u64, n: usize) -> Tensor {
        NoiseSource::new(seed).normal_tensor(&[n], 1.0).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_steps(), 1000);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.betas().iter().all(|&b| 0.0 < b && b < 1.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars().iter().all(|&a| 0.0 < a && a < 1.0));
        assert!(s.alpha_bar(0).unwrap() >= 0.999);
        for &ab in s.alpha_bars() {
            let sum = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::default();
        let x0 = NoiseSource::new(1)
            .normal_tensor(&[64], 0.5)
            .unwrap()
            .map(|v| v.clamp(-1.0, 1.0), "clamp")
            .unwrap();
        let noise = rand_vec(2, 64)
            .map(|v| v.clamp(-1.0, 1.0), "clamp")
            .unwrap();
        let near = s.q_sample(&x0, 0, &noise).unwrap();
        assert!(near.max_abs_diff(&x0) < 0.03);

        let zero = Tensor::zeros(&[64]);
        let ab = s.alpha_bar(400).unwrap();
        assert_eq!(
            s.q_sample(&x0, 400, &zero).unwrap(),
            x0.scale(ab.sqrt()).unwrap()
        );
        assert!(matches!(
            s.q_sample(&x0, 1000, &noise),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = NoiseSchedule::default();
        let x0 = rand_vec(3, 32);
        let eps = rand_vec(4, 32);
        for t in [0, 1, 250, 500, 750, 999] {
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.predict_x0(&xt, &eps, t).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn predict_x0_is_homogeneous() {
        let s = NoiseSchedule::default();
        let xt = rand_vec(5, 16);
        let eps = rand_vec(6, 16);
        let one = s.predict_x0(&xt, &eps, 300).unwrap();
        let two = s
            .predict_x0(&xt.scale(2.0).unwrap(), &eps.scale(2.0).unwrap(), 300)
            .unwrap();
        assert!(two.max_abs_diff(&one.scale(2.0).unwrap()) < 1e-12);
        let zero = Tensor::zeros(&[16]);
        assert!(s.predict_x0(&xt, &zero, 0).unwrap().max_abs_diff(&xt) < 1e-3 * xt.max_abs());
    }

    #[test]
    fn ddim_step_examples() {
        let s = NoiseSchedule::default();
        let xt = rand_vec(7, 16);
        let zero = Tensor::zeros(&[16]);
        let stepped = s.ddim_step(&xt, &zero, 500, Some(480)).unwrap();
        let ratio = (s.alpha_bar(480).unwrap() / s.alpha_bar(500).unwrap()).sqrt();
        assert!(stepped.max_abs_diff(&xt.scale(ratio).unwrap()) < 1e-12);

        let x0 = rand_vec(8, 16);
        let eps = rand_vec(9, 16);
        let x20 = s.q_sample(&x0, 20, &eps).unwrap();
        let last = s.ddim_step(&x20, &eps, 20, None).unwrap();
        assert!(last.max_abs_diff(&x0) < 1e-8);

        assert_eq!(
            s.ddim_step(&xt, &eps, 500, Some(480)).unwrap(),
            s.ddim_step(&xt, &eps, 500, Some(480)).unwrap()
        );
        assert!(matches!(
            s.ddim_step(&xt, &eps, 480, Some(480)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn traced_predict_x0_matches_values() {
        let s = NoiseSchedule::default();
        let xt = rand_vec(10, 8);
        let eps = rand_vec(11, 8);
        let mut tr = GradientTrace::new();
        let xv = tr.input(xt.clone());
        let ev = tr.constant(eps.clone());
        let x0 = s.predict_x0_var(&mut tr, xv, ev, 700).unwrap();
        assert!(
            tr.value(x0)
                .unwrap()
                .max_abs_diff(&s.predict_x0(&xt, &eps, 700).unwrap())
                < 1e-12
        );
        let sum = tr.sum(x0).unwrap();
        let g = tr.gradient(sum, xv).unwrap();
        let expected = 1.0 / s.alpha_bar(700).unwrap().sqrt();
        assert!(g.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }
}
