//! Value-level vector functions used by the selection and scoring code.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const NORMALIZATION_TOL: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x * sigmoid(x)`.
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(v: &Tensor) -> Result<Tensor> {
    v.map(silu_scalar, "silu")
}

/// Softmax over all entries of `v`, with max subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    softmax_with_temperature(v, 1.0)
}

pub fn softmax_with_temperature(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Precondition(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v
        .data()
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|e| e / total).collect();
    Tensor::from_op(vec![v.len()], probs, "softmax")
}

fn check_distribution(p: &Tensor, name: &str) -> Result<()> {
    if let Some(bad) = p.data().iter().find(|&&x| x < 0.0) {
        return Err(Error::Precondition(format!(
            "{name} has a negative entry {bad}"
        )));
    }
    let total = p.sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Precondition(format!(
            "{name} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence: lengths {} and {} differ",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.data().iter().zip(q.data()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Log-softmax at `temperature`, via log-sum-exp.
pub fn log_softmax_with_temperature(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::Dimension("log-softmax of an empty vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Precondition(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: Vec<f64> = v.data().iter().map(|&x| (x - max) / temperature).collect();
    let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
    Tensor::from_op(
        vec![v.len()],
        z.into_iter().map(|x| x - lse).collect(),
        "log-softmax",
    )
}

/// `KL(softmax(a / T) || softmax(b / T))` evaluated in log space, so tail
/// probabilities that underflow to zero cannot make it undefined.
pub fn kl_divergence_logits(a: &Tensor, b: &Tensor, temperature: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence_logits: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let lp = log_softmax_with_temperature(a, temperature)?;
    let lq = log_softmax_with_temperature(b, temperature)?;
    Ok(lp
        .data()
        .iter()
        .zip(lq.data())
        .map(|(&p, &q)| p.exp() * (p - q))
        .sum())
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let c = a.dot(b)? / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}
