//! Reverse-mode differentiation over tensor kernels.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps its
//! forward value and the [`Operation`] that produced it; [`Tape::backward`]
//! walks the nodes in reverse insertion order (a valid topological order, since
//! a node can only reference nodes recorded before it) and accumulates
//! vector-Jacobian products into the leaves.
//!
//! Layer kernels with their own backward passes (convolution, pooling,
//! subpixel shuffle) live in [`crate::layers`] and plug in through
//! [`Tape::push`].

use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Range;

use thiserror::Error;

use crate::tensor::{gemm, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function is not deterministic: {first} then {second} at identical parameters")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("finite difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("forward pass failed: {0}")]
    Forward(#[source] Box<dyn std::error::Error + Send + Sync>),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What [`Operation::backward`] sees of its node.
pub struct OpContext<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input wants a gradient; ops may skip work for `false`.
    pub needs_grad: Vec<bool>,
}

/// A differentiable kernel recorded on the tape.
pub trait Operation: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, given the gradient of the output.
    /// Entries for inputs that do not need a gradient may be `None`.
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    op: Option<Box<dyn Operation>>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    branch_state: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            branch_state: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records a node computed by `op` from `inputs`.
    pub fn push(&mut self, op: impl Operation + 'static, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape if nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(self.value(v)))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Mixes non-differentiable branch decisions (relu masks, pooling argmax)
    /// into a signature. Finite-difference checks compare signatures to detect
    /// perturbations that cross a kink.
    pub fn record_branch<H: Hash + ?Sized>(&mut self, tag: &H) {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.branch_state.hash(&mut h);
        tag.hash(&mut h);
        self.branch_state = h.finish();
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_state
    }

    /// Accumulates `d root / d leaf` into every leaf that requires a gradient.
    /// Calling it again without [`Tape::zero_grad`] adds to the accumulators.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.value(root).shape();
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        local[root.0] = Some(Tensor::full(root_shape.to_vec(), 1.0)?);
        for idx in (0..=root.0).rev() {
            let Some(grad) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot => *slot = Some(grad),
                }
                continue;
            };
            let ctx = OpContext {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs_grad: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = op.backward(&ctx, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape(), "{}", op.name());
                match &mut local[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
            .into());
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(AddOp, &[a, b], value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(SubOp, &[a, b], value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(MulOp, &[a, b], value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(ScaleOp(s), &[a], value)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).add_scalar(s);
        self.push(AddScalarOp, &[a], value)
    }

    /// Elementwise product with a fixed tensor (dropout masks, loss weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let value = self.value(a).mul(&c)?;
        Ok(self.push(MulConstOp(c), &[a], value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(MatMulOp, &[a, b], value))
    }

    /// `x[N×D] · w[M×D]ᵀ + bias[M] -> [N×M]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        let ok = xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1] && bs == [ws[0]];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            }
            .into());
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(n, d, m, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(LinearOp, &[x, w, bias], value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(SigmoidOp, &[a], value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(TanhOp, &[a], value)
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
        let value = input.map(|v| if v > 0.0 { v } else { 0.0 });
        self.record_branch(&mask);
        self.push(ReluOp, &[a], value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(SumOp, &[a], value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(MeanOp, &[a], value)
    }

    /// Mean of squared differences; `target` is treated as data.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.check_same("mse", prediction, target)?;
        let (p, t) = (self.value(prediction), self.value(target));
        let sq: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sq / p.len() as f64);
        Ok(self.push(MseOp, &[prediction, target], value))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(ReshapeOp, &[a], value))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let extents = values.iter().map(|t| t.shape().get(axis).copied().unwrap_or(0)).collect();
        let value = Tensor::concat(&values, axis)?;
        Ok(self.push(ConcatOp { axis, extents }, parts, value))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let value = self.value(a).slice(axis, range.clone())?;
        Ok(self.push(SliceOp { axis, range }, &[a], value))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip(b, f)
}

#[derive(Debug)]
struct AddOp;
impl Operation for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

#[derive(Debug)]
struct SubOp;
impl Operation for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.scale(-1.0))]
    }
}

#[derive(Debug)]
struct MulOp;
impl Operation for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        vec![
            ctx.needs_grad[0].then(|| zip_map(grad, b, |g, y| g * y)),
            ctx.needs_grad[1].then(|| zip_map(grad, a, |g, x| g * x)),
        ]
    }
}

#[derive(Debug)]
struct ScaleOp(f64);
impl Operation for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.scale(self.0))]
    }
}

#[derive(Debug)]
struct AddScalarOp;
impl Operation for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

#[derive(Debug)]
struct MulConstOp(Tensor);
impl Operation for MulConstOp {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(grad, &self.0, |g, c| g * c))]
    }
}

#[derive(Debug)]
struct MatMulOp;
impl Operation for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = ctx.needs_grad[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, grad.data(), false, b.data(), true, &mut out, 0.0);
            Tensor::new(vec![m, k], out).expect("shape")
        });
        let db = ctx.needs_grad[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm(k, m, n, a.data(), true, grad.data(), false, &mut out, 0.0);
            Tensor::new(vec![k, n], out).expect("shape")
        });
        vec![da, db]
    }
}

#[derive(Debug)]
struct LinearOp;
impl Operation for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let dx = ctx.needs_grad[0].then(|| {
            let mut out = vec![0.0; n * d];
            gemm(n, m, d, grad.data(), false, w.data(), false, &mut out, 0.0);
            Tensor::new(vec![n, d], out).expect("shape")
        });
        let dw = ctx.needs_grad[1].then(|| {
            let mut out = vec![0.0; m * d];
            gemm(m, n, d, grad.data(), true, x.data(), false, &mut out, 0.0);
            Tensor::new(vec![m, d], out).expect("shape")
        });
        let db = ctx.needs_grad[2].then(|| {
            let mut out = vec![0.0; m];
            for row in grad.data().chunks_exact(m) {
                out.iter_mut().zip(row).for_each(|(o, g)| *o += g);
            }
            Tensor::new(vec![m], out).expect("shape")
        });
        vec![dx, dw, db]
    }
}

#[derive(Debug)]
struct SigmoidOp;
impl Operation for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(grad, ctx.output, |g, s| g * s * (1.0 - s)))]
    }
}

#[derive(Debug)]
struct TanhOp;
impl Operation for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(grad, ctx.output, |g, t| g * (1.0 - t * t)))]
    }
}

#[derive(Debug)]
struct ReluOp;
impl Operation for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(grad, ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
    }
}

#[derive(Debug)]
struct SumOp;
impl Operation for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        vec![Some(ctx.inputs[0].map(|_| g))]
    }
}

#[derive(Debug)]
struct MeanOp;
impl Operation for MeanOp {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0] / ctx.inputs[0].len() as f64;
        vec![Some(ctx.inputs[0].map(|_| g))]
    }
}

#[derive(Debug)]
struct MseOp;
impl Operation for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (p, t) = (ctx.inputs[0], ctx.inputs[1]);
        let k = 2.0 * grad.data()[0] / p.len() as f64;
        let dp = zip_map(p, t, |a, b| k * (a - b));
        let dt = ctx.needs_grad[1].then(|| dp.scale(-1.0));
        vec![Some(dp), dt]
    }
}

#[derive(Debug)]
struct ReshapeOp;
impl Operation for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(ctx.inputs[0].shape().to_vec()).expect("same length"))]
    }
}

#[derive(Debug)]
struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
}
impl Operation for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        self.extents
            .iter()
            .zip(&ctx.needs_grad)
            .map(|(&e, &needed)| {
                let range = start..start + e;
                start += e;
                needed.then(|| grad.slice(self.axis, range).expect("in range"))
            })
            .collect()
    }
}

#[derive(Debug)]
struct SliceOp {
    axis: usize,
    range: Range<usize>,
}
impl Operation for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let shape = ctx.inputs[0].shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let extent = shape[self.axis];
        let len = self.range.end - self.range.start;
        let mut out = vec![0.0; ctx.inputs[0].len()];
        for o in 0..outer {
            let dst = (o * extent + self.range.start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
        }
        vec![Some(Tensor::new(shape.to_vec(), out).expect("shape"))]
    }
}

/// Outcome of a gradient check for one parameter tensor.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation crossed a relu/pooling kink.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(p+h) − f(p−h)) / 2h`, one coordinate at a time.
///
/// `f` records its forward pass on the tape it is given, reading parameters
/// from the supplied vars, and returns the scalar root. It must be
/// deterministic; dropout belongs in eval mode here. A coordinate is excluded
/// (not failed) when either perturbation changes the branch signature, i.e.
/// crosses a relu or max-pool kink.
pub fn finite_diff_check<F, E>(mut f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: std::error::Error + Send + Sync + 'static,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let mut run = |values: &[Tensor], grads: bool| -> Result<(f64, u64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars).map_err(|e| AutodiffError::Forward(Box::new(e)))?;
        let value = tape.value(root).data()[0];
        let sig = tape.branch_signature();
        if !grads {
            return Ok((value, sig, Vec::new()));
        }
        tape.backward(root)?;
        Ok((value, sig, vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    };
    let (base, base_sig, analytic) = run(params, true)?;
    let mut eval = |values: &[Tensor]| run(values, false).map(|(v, s, _)| (v, s));
    let (again, _) = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(AutodiffError::NonDeterministicFunction {
            first: base,
            second: again,
        });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: param.name().map(str::to_owned).unwrap_or_else(|| format!("param{pi}")),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for i in 0..param.len() {
            let original = param.data()[i];
            work[pi] = with_element(param, i, original + h);
            let (plus, sig_plus) = eval(&work)?;
            work[pi] = with_element(param, i, original - h);
            let (minus, sig_minus) = eval(&work)?;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[i], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        work[pi] = param.clone();
        reports.push(check);
    }
    let passed = reports.iter().all(|r| r.max_rel_error < tol);
    Ok(GradReport {
        params: reports,
        step: h,
        tol,
        passed,
    })
}

fn with_element(t: &Tensor, i: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = value;
    let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    match t.name() {
        Some(n) => out.with_name(n),
        None => out,
    }
}
