//! Reverse-mode gradient trace.
//!
//! A [`GradientTrace`] is an explicit, single-owner tape. Tensors enter it as
//! either registered inputs (which receive gradients) or constants, and every
//! primitive applied through the trace appends a node. [`GradientTrace::backward`]
//! replays the nodes in reverse from a scalar output.
//!
//! An inactive trace evaluates the same arithmetic but records every result as
//! a constant, so value-only passes and gradient passes share one code path and
//! produce bit-identical values.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::ops::{silu_grad_scalar, silu_scalar};
use crate::numerics::tensor::{matmul_nt, matmul_tn};
use crate::numerics::Tensor;

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value held by a particular trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    trace: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[m, n] + [m]` broadcast over columns.
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Silu(usize),
    Sqrt(usize),
    Sum(usize),
    /// tensor divided by a one-element tensor
    DivScalar(usize, usize),
    ConcatRows(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_input: bool,
}

#[derive(Debug)]
pub struct GradientTrace {
    id: u64,
    nodes: Vec<Node>,
    active: bool,
}

impl Default for GradientTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientTrace {
    /// Trace that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            active: true,
        }
    }

    /// Trace that only evaluates values.
    pub fn inactive() -> Self {
        Self {
            active: false,
            ..Self::new()
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Number of recorded primitive operations (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, is_input: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_input,
        });
        Var {
            trace: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.trace != self.id {
            return Err(Error::Contract(
                "variable belongs to a different trace".into(),
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Contract("dangling variable".into()))
    }

    /// Registers a tensor that will receive a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        let active = self.active;
        self.push(value, Op::Leaf, active, active)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        let mut requires_grad = false;
        for &p in parents {
            requires_grad |= self.node(p)?.requires_grad;
        }
        let op = if self.active && requires_grad {
            op
        } else {
            Op::Leaf
        };
        Ok(self.push(value, op, requires_grad && self.active, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.matmul(self.value(b)?)?;
        self.record(out, Op::MatMul(a.index, b.index), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        self.record(out, Op::Add(a.index, b.index), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.sub(self.value(b)?)?;
        self.record(out, Op::Sub(a.index, b.index), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.mul(self.value(b)?)?;
        self.record(out, Op::Mul(a.index, b.index), &[a, b])
    }

    /// Adds a length-`m` bias to every column of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a)?;
        let bv = self.value(bias)?;
        let (m, n) = av.dims2()?;
        if bv.len() != m {
            return Err(Error::Dimension(format!(
                "add_bias: {m} rows but bias of length {}",
                bv.len()
            )));
        }
        let mut out = av.to_vec();
        for (i, &b) in bv.data().iter().enumerate() {
            for o in &mut out[i * n..(i + 1) * n] {
                *o += b;
            }
        }
        let out = Tensor::from_op(av.shape().to_vec(), out, "add_bias")?;
        self.record(out, Op::AddBias(a.index, bias.index), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a)?.scale(factor)?;
        self.record(out, Op::Scale(a.index, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a)?.map(|v| v + c, "add_scalar")?;
        self.record(out, Op::AddScalar(a.index), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(silu_scalar, "silu")?;
        self.record(out, Op::Silu(a.index), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a)?;
        if av.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of a negative value"));
        }
        let out = av.map(f64::sqrt, "sqrt")?;
        self.record(out, Op::Sqrt(a.index), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a)?.sum();
        let out = Tensor::from_op(vec![], vec![s], "sum")?;
        self.record(out, Op::Sum(a.index), &[a])
    }

    /// Divides every entry of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let d = self.value(s)?.item()?;
        if d == 0.0 {
            return Err(Error::Degenerate("division by zero".into()));
        }
        let out = self.value(a)?.map(|v| v / d, "div_scalar")?;
        self.record(out, Op::DivScalar(a.index, s.index), &[a, s])
    }

    /// Stacks `[m1, n]` on top of `[m2, n]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a)?;
        let bv = self.value(b)?;
        let (m1, n1) = av.dims2()?;
        let (m2, n2) = bv.dims2()?;
        if n1 != n2 {
            return Err(Error::Dimension(format!(
                "concat_rows: column counts {n1} and {n2} differ"
            )));
        }
        let mut data = av.to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_op(vec![m1 + m2, n1], data, "concat_rows")?;
        self.record(out, Op::ConcatRows(a.index, b.index), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a)?.reshape(shape)?;
        self.record(out, Op::Reshape(a.index), &[a])
    }

    /// `sum(a * b)`
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Euclidean norm as a one-element tensor.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.dot(a, a)?;
        self.sqrt(sq)
    }

    /// `a / ||a||`
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let n = self.norm(a)?;
        if self.value(n)?.item()? == 0.0 {
            return Err(Error::Degenerate("normalizing a zero-norm vector".into()));
        }
        self.div_scalar(a, n)
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.norm(a)?;
        let nb = self.norm(b)?;
        if self.value(na)?.item()? == 0.0 || self.value(nb)?.item()? == 0.0 {
            return Err(Error::Degenerate(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let d = self.dot(a, b)?;
        let denom = self.mul(na, nb)?;
        self.div_scalar(d, denom)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = self.node(output)?;
        if !out_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.index + 1];
        if out_node.requires_grad {
            grads[output.index] = Some(vec![1.0]);
        }

        for idx in (0..=output.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, &matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut grads, b, &matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    self.pass_through(&mut grads, a, &g);
                    self.pass_through(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    self.pass_through(&mut grads, a, &g);
                    if self.nodes[b].requires_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    if self.nodes[a].requires_grad {
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                        accumulate(&mut grads, a, &ga);
                    }
                    if self.nodes[b].requires_grad {
                        let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                        accumulate(&mut grads, b, &gb);
                    }
                }
                Op::AddBias(a, bias) => {
                    self.pass_through(&mut grads, a, &g);
                    if self.nodes[bias].requires_grad {
                        let (m, n) = self.nodes[a].value.dims2()?;
                        let gb: Vec<f64> =
                            (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                        accumulate(&mut grads, bias, &gb);
                    }
                }
                Op::Scale(a, factor) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    self.pass_through(&mut grads, a, &g);
                }
                Op::Silu(a) => {
                    let x = self.nodes[a].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| g * silu_grad_scalar(x))
                        .collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    if y.iter().any(|&y| y == 0.0) {
                        return Err(Error::NonFinite("gradient of sqrt at zero"));
                    }
                    let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    accumulate(&mut grads, a, &vec![g[0]; n]);
                }
                Op::DivScalar(a, s) => {
                    let d = self.nodes[s].value.data()[0];
                    if self.nodes[a].requires_grad {
                        let ga: Vec<f64> = g.iter().map(|v| v / d).collect();
                        accumulate(&mut grads, a, &ga);
                    }
                    if self.nodes[s].requires_grad {
                        // d(a/s)/ds = -a/s^2 = -out/s
                        let out = node.value.data();
                        let gs: f64 = g.iter().zip(out).map(|(g, o)| -g * o / d).sum();
                        accumulate(&mut grads, s, &[gs]);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let split = self.nodes[a].value.len();
                    self.pass_through(&mut grads, a, &g[..split]);
                    self.pass_through(&mut grads, b, &g[split..]);
                }
            }
            if node.is_input {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            trace: self.id,
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            inputs: self.nodes.iter().map(|n| n.is_input).collect(),
        })
    }

    fn pass_through(&self, grads: &mut [Option<Vec<f64>>], target: usize, g: &[f64]) {
        if self.nodes[target].requires_grad {
            accumulate(grads, target, g);
        }
    }

    /// `d(output) / d(wrt)`, shaped like `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Tensor> {
        self.backward(output)?.get(wrt)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, g: &[f64]) {
    match &mut grads[target] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of one reverse sweep, queried per registered input.
#[derive(Debug)]
pub struct Gradients {
    trace: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, wrt: Var) -> Result<Tensor> {
        if wrt.trace != self.trace || !self.inputs.get(wrt.index).copied().unwrap_or(false) {
            return Err(Error::UnknownInput);
        }
        let shape = self.shapes[wrt.index].clone();
        match self.grads.get(wrt.index).and_then(Option::as_ref) {
            Some(g) => Tensor::from_op(shape, g.clone(), "gradient"),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}
