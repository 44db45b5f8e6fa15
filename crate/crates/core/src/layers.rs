//! 1D building blocks: convolution, max pooling, LSTM cells, subpixel shuffle,
//! relu and dropout.
//!
//! Activations are laid out `[N, T, C]` (batch, time, channels). Each kernel has
//! a plain tensor entry point and a tape entry point (`*_var`) that records a
//! node with a hand-written backward pass.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, OpContext, Operation, Tape, Var};
use crate::rng;
use crate::tensor::{gemm, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("effective kernel length {kernel} exceeds input length {len}")]
    KernelLargerThanInput { kernel: usize, len: usize },
    #[error("pooling window {window} exceeds input length {len}")]
    WindowLargerThanInput { window: usize, len: usize },
    #[error("{channels} channels are not divisible by factor {factor}")]
    ChannelsNotDivisible { channels: usize, factor: usize },
    #[error("dropout rate must be in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("invalid layer argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, len, c] => Ok((n, len, c)),
        _ => Err(LayerError::InvalidArgument(format!(
            "expected [N, T, C] activations, got shape {:?}",
            t.shape()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: Padding) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Span of input samples one output reads: `(k − 1)·dilation + 1`.
    pub fn effective_kernel(&self, kernel_len: usize) -> usize {
        (kernel_len - 1) * self.dilation + 1
    }

    pub fn pad_left(&self, kernel_len: usize) -> usize {
        match self.padding {
            Padding::Same => (self.effective_kernel(kernel_len) - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn output_len(&self, input_len: usize, kernel_len: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel_len == 0 {
            return Err(LayerError::InvalidArgument(format!(
                "stride {}, dilation {} and kernel length {} must be positive",
                self.stride, self.dilation, kernel_len
            )));
        }
        match self.padding {
            Padding::Same => Ok(input_len.div_ceil(self.stride)),
            Padding::Valid => {
                let k = self.effective_kernel(kernel_len);
                if k > input_len {
                    return Err(LayerError::KernelLargerThanInput {
                        kernel: k,
                        len: input_len,
                    });
                }
                Ok((input_len - k) / self.stride + 1)
            }
        }
    }
}

/// Weights `[outC, inC, kLen]`, bias `[outC]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl Conv1dParams {
    pub fn new(weights: Tensor, bias: Tensor, geometry: ConvGeometry) -> Result<Self> {
        let [out_c, _, _] = *weights.shape() else {
            return Err(LayerError::InvalidArgument(format!(
                "conv weights must be [outC, inC, kLen], got {:?}",
                weights.shape()
            )));
        };
        if bias.shape() != [out_c] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d bias",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            weights,
            bias,
            geometry,
        })
    }

    /// Uniform `±sqrt(3 / fan_in)` weights and zero bias.
    pub fn init(in_c: usize, out_c: usize, kernel_len: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let weights = conv_init(in_c, out_c, kernel_len, rng);
        let bias = Tensor::zeros(vec![out_c]).expect("positive extent");
        Self {
            weights,
            bias,
            geometry,
        }
    }
}

pub(crate) fn conv_init(in_c: usize, out_c: usize, kernel_len: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (3.0 / (in_c * kernel_len) as f64).sqrt();
    Tensor::from_fn(vec![out_c, in_c, kernel_len], |_| rng.random_range(-bound..bound))
        .expect("positive extents")
}

struct ConvShape {
    n: usize,
    t_in: usize,
    c_in: usize,
    t_out: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
}

impl ConvShape {
    fn of(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Result<Self> {
        let (n, t_in, c_in) = dims3(x)?;
        let [c_out, w_in, k] = *w.shape() else {
            return Err(LayerError::InvalidArgument(format!(
                "conv weights must be [outC, inC, kLen], got {:?}",
                w.shape()
            )));
        };
        if w_in != c_in {
            return Err(LayerError::ChannelMismatch {
                expected: w_in,
                got: c_in,
            });
        }
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d bias",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            n,
            t_in,
            c_in,
            t_out: g.output_len(t_in, k)?,
            c_out,
            k,
            stride: g.stride,
            dilation: g.dilation,
            pad_left: g.pad_left(k),
        })
    }

    fn kc(&self) -> usize {
        self.k * self.c_in
    }

    /// Input time index read by output `t`, tap `j`, if inside the signal.
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t * self.stride + j * self.dilation) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }

    /// Unrolls one batch element into `[t_out, k·c_in]` patches.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (c, kc) = (self.c_in, self.kc());
        for t in 0..self.t_out {
            let row = &mut cols[t * kc..(t + 1) * kc];
            for j in 0..self.k {
                let dst = &mut row[j * c..(j + 1) * c];
                match self.source(t, j) {
                    Some(p) => dst.copy_from_slice(&x[p * c..(p + 1) * c]),
                    None => dst.fill(0.0),
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (c, kc) = (self.c_in, self.kc());
        for t in 0..self.t_out {
            let row = &cols[t * kc..(t + 1) * kc];
            for j in 0..self.k {
                if let Some(p) = self.source(t, j) {
                    let dst = &mut dx[p * c..(p + 1) * c];
                    dst.iter_mut().zip(&row[j * c..(j + 1) * c]).for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    /// `[outC, inC, k]` weights as a `[k·inC, outC]` matrix.
    fn weight_matrix(&self, w: &[f64]) -> Vec<f64> {
        let (c, o, k) = (self.c_in, self.c_out, self.k);
        let mut m = vec![0.0; k * c * o];
        for oo in 0..o {
            for ci in 0..c {
                for j in 0..k {
                    m[(j * c + ci) * o + oo] = w[(oo * c + ci) * k + j];
                }
            }
        }
        m
    }
}

fn conv1d_raw(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Result<(Tensor, ConvShape)> {
    let s = ConvShape::of(x, w, b, g)?;
    let wm = s.weight_matrix(w.data());
    let (in_stride, out_stride) = (s.t_in * s.c_in, s.t_out * s.c_out);
    let mut out = vec![0.0; s.n * out_stride];
    out.par_chunks_mut(out_stride)
        .zip(x.data().par_chunks(in_stride))
        .for_each(|(y, xn)| {
            let mut cols = vec![0.0; s.t_out * s.kc()];
            s.im2col(xn, &mut cols);
            for row in y.chunks_exact_mut(s.c_out) {
                row.copy_from_slice(b.data());
            }
            gemm(s.t_out, s.kc(), s.c_out, &cols, false, &wm, false, y, 1.0);
        });
    let y = Tensor::new(vec![s.n, s.t_out, s.c_out], out)?;
    Ok((y, s))
}

/// Cross-correlation: `y[n,t,o] = bias[o] + Σ_{c,j} w[o,c,j]·x̃[n, t·stride + j·dilation, c]`
/// with `x̃` zero-padded according to the padding mode.
pub fn conv1d(x: &Tensor, p: &Conv1dParams) -> Result<Tensor> {
    Ok(conv1d_raw(x, &p.weights, &p.bias, &p.geometry)?.0)
}

#[derive(Debug)]
struct Conv1dOp {
    geometry: ConvGeometry,
}

impl Operation for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w, b) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let s = ConvShape::of(x, w, b, &self.geometry).expect("validated in forward");
        let wm = s.weight_matrix(w.data());
        let kc = s.kc();
        let (in_stride, out_stride) = (s.t_in * s.c_in, s.t_out * s.c_out);
        let need_x = ctx.needs_grad[0];
        let need_w = ctx.needs_grad[1];

        // Per-element partials, reduced below in batch order for determinism.
        let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..s.n)
            .into_par_iter()
            .map(|n| {
                let dy = &grad.data()[n * out_stride..(n + 1) * out_stride];
                let dwm = need_w.then(|| {
                    let mut cols = vec![0.0; s.t_out * kc];
                    s.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
                    let mut dwm = vec![0.0; kc * s.c_out];
                    gemm(kc, s.t_out, s.c_out, &cols, true, dy, false, &mut dwm, 0.0);
                    dwm
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; s.t_out * kc];
                    gemm(s.t_out, s.c_out, kc, dy, false, &wm, true, &mut dcols, 0.0);
                    let mut dx = vec![0.0; in_stride];
                    s.col2im(&dcols, &mut dx);
                    dx
                });
                (dx, dwm)
            })
            .collect();

        let dx = need_x.then(|| {
            let mut data = Vec::with_capacity(x.len());
            for (dx, _) in &partials {
                data.extend_from_slice(dx.as_ref().expect("computed"));
            }
            Tensor::new(x.shape().to_vec(), data).expect("shape")
        });
        let dw = need_w.then(|| {
            let mut dwm = vec![0.0; kc * s.c_out];
            for (_, part) in &partials {
                dwm.iter_mut()
                    .zip(part.as_ref().expect("computed"))
                    .for_each(|(a, b)| *a += b);
            }
            let mut dw = vec![0.0; w.len()];
            for oo in 0..s.c_out {
                for ci in 0..s.c_in {
                    for j in 0..s.k {
                        dw[(oo * s.c_in + ci) * s.k + j] = dwm[(j * s.c_in + ci) * s.c_out + oo];
                    }
                }
            }
            Tensor::new(w.shape().to_vec(), dw).expect("shape")
        });
        let db = ctx.needs_grad[2].then(|| {
            let mut db = vec![0.0; s.c_out];
            for row in grad.data().chunks_exact(s.c_out) {
                db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            Tensor::new(vec![s.c_out], db).expect("shape")
        });
        vec![dx, dw, db]
    }
}

pub fn conv1d_var(tape: &mut Tape, x: Var, w: Var, b: Var, geometry: ConvGeometry) -> Result<Var> {
    let (y, _) = conv1d_raw(tape.value(x), tape.value(w), tape.value(b), &geometry)?;
    Ok(tape.push(Conv1dOp { geometry }, &[x, w, b], y))
}

// ---------------------------------------------------------------------------
// Max pooling

fn maxpool_raw(x: &Tensor, extent: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, t, c) = dims3(x)?;
    if extent == 0 || stride == 0 {
        return Err(LayerError::InvalidArgument(format!(
            "pooling extent {extent} and stride {stride} must be positive"
        )));
    }
    if extent > t {
        return Err(LayerError::WindowLargerThanInput { window: extent, len: t });
    }
    let t_out = (t - extent) / stride + 1;
    let mut out = Vec::with_capacity(n * t_out * c);
    let mut argmax = Vec::with_capacity(n * t_out * c);
    let data = x.data();
    for nn in 0..n {
        for to in 0..t_out {
            for ch in 0..c {
                let start = (nn * t + to * stride) * c + ch;
                let mut best = start;
                for i in 1..extent {
                    let idx = start + i * c;
                    // Strict comparison keeps the earliest index on ties.
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, t_out, c], out)?, argmax))
}

/// Window maxima over time, per channel; output length `⌊(T − f)/s⌋ + 1`.
pub fn maxpool1d(x: &Tensor, extent: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool_raw(x, extent, stride)?.0)
}

#[derive(Debug)]
struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Operation for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool1d"
    }

    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; ctx.inputs[0].len()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx[src] += g;
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("shape"))]
    }
}

pub fn maxpool1d_var(tape: &mut Tape, x: Var, extent: usize, stride: usize) -> Result<Var> {
    let (y, argmax) = maxpool_raw(tape.value(x), extent, stride)?;
    tape.record_branch(&argmax);
    Ok(tape.push(MaxPoolOp { argmax }, &[x], y))
}

// ---------------------------------------------------------------------------
// Subpixel shuffle

fn subpixel_check(x: &Tensor, r: usize) -> Result<(usize, usize, usize)> {
    let (n, t, c) = dims3(x)?;
    if r == 0 || c % r != 0 {
        return Err(LayerError::ChannelsNotDivisible { channels: c, factor: r });
    }
    Ok((n, t, c))
}

/// `[N, T, C] -> [N, rT, C/r]` with `out[n, t·r + p, c] = x[n, t, c·r + p]`.
pub fn subpixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, t, c) = subpixel_check(x, r)?;
    let c_out = c / r;
    let mut out = vec![0.0; x.len()];
    for (step, (dst, src)) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)).enumerate() {
        let _ = step;
        // Within one input step the [C/r, r] channel grid is transposed to [r, C/r].
        for cc in 0..c_out {
            for p in 0..r {
                dst[p * c_out + cc] = src[cc * r + p];
            }
        }
    }
    Ok(Tensor::new(vec![n, t * r, c_out], out)?)
}

/// Inverse of [`subpixel_shuffle`]: `[N, rT, C/r] -> [N, T, C]`.
pub fn subpixel_unshuffle(y: &Tensor, r: usize) -> Result<Tensor> {
    let (n, rt, c_out) = dims3(y)?;
    if r == 0 || rt % r != 0 {
        return Err(LayerError::InvalidArgument(format!(
            "length {rt} is not divisible by factor {r}"
        )));
    }
    let c = c_out * r;
    let mut out = vec![0.0; y.len()];
    for (dst, src) in out.chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
        for cc in 0..c_out {
            for p in 0..r {
                dst[cc * r + p] = src[p * c_out + cc];
            }
        }
    }
    Ok(Tensor::new(vec![n, rt / r, c], out)?)
}

#[derive(Debug)]
struct SubpixelOp {
    factor: usize,
}

impl Operation for SubpixelOp {
    fn name(&self) -> &'static str {
        "subpixel_shuffle"
    }

    fn backward(&self, _ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(subpixel_unshuffle(grad, self.factor).expect("shape from forward"))]
    }
}

pub fn subpixel_shuffle_var(tape: &mut Tape, x: Var, r: usize) -> Result<Var> {
    let y = subpixel_shuffle(tape.value(x), r)?;
    Ok(tape.push(SubpixelOp { factor: r }, &[x], y))
}

// ---------------------------------------------------------------------------
// Activations

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LayerError::InvalidRate(rate));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor> {
    check_rate(rate)?;
    let mut stream = rng::stream(seed, "dropout", 0);
    let keep = 1.0 / (1.0 - rate);
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if stream.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })?)
}

pub fn dropout(x: &Tensor, rate: f64, seed: u64, mode: Mode) -> Result<Tensor> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    Ok(x.mul(&dropout_mask(x.shape(), rate, seed)?)?)
}

pub fn dropout_var(tape: &mut Tape, x: Var, rate: f64, seed: u64, mode: Mode) -> Result<Var> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.shape(x), rate, seed)?;
    Ok(tape.mul_const(x, mask)?)
}

// ---------------------------------------------------------------------------
// LSTM

/// Gate order inside the stacked weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Cell = 3,
}

/// One direction of an LSTM: `w_ih [4H×D]`, `w_hh [4H×H]`, `bias [4H]`, gates
/// stacked in [`Gate`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    /// Uniform `±1/√H` weights; the forget-gate bias starts at +1.
    pub fn init(input_size: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: Vec<usize>| {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).expect("positive extents")
        };
        let w_ih = uniform(vec![4 * hidden, input_size]);
        let w_hh = uniform(vec![4 * hidden, hidden]);
        let bias = uniform(vec![4 * hidden]);
        let bias = Tensor::from_fn(vec![4 * hidden], |i| {
            let b = bias.data()[i];
            if i / hidden == Gate::Forget as usize {
                b + 1.0
            } else {
                b
            }
        })
        .expect("positive extents");
        Self { w_ih, w_hh, bias }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    /// `[H×D]` input weights of one gate.
    pub fn gate_input_weights(&self, gate: Gate) -> Tensor {
        let h = self.hidden_size();
        let g = gate as usize;
        self.w_ih.slice(0, g * h..(g + 1) * h).expect("gate in range")
    }

    /// `[H×H]` recurrent weights of one gate.
    pub fn gate_recurrent_weights(&self, gate: Gate) -> Tensor {
        let h = self.hidden_size();
        let g = gate as usize;
        self.w_hh.slice(0, g * h..(g + 1) * h).expect("gate in range")
    }

    pub fn gate_bias(&self, gate: Gate) -> Tensor {
        let h = self.hidden_size();
        let g = gate as usize;
        self.bias.slice(0, g * h..(g + 1) * h).expect("gate in range")
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.bias.len()
    }

    pub fn to_vars(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            w_ih: tape.param(self.w_ih.clone()),
            w_hh: tape.param(self.w_hh.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Bidirectional,
}

/// An LSTM over a sequence; the bidirectional variant adds a second cell run
/// in reverse and concatenates the two hidden states (width `2H`).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub forward: LstmCell,
    pub backward: Option<LstmCell>,
}

impl LstmParams {
    pub fn init(input_size: usize, hidden: usize, direction: Direction, rng: &mut impl Rng) -> Self {
        let forward = LstmCell::init(input_size, hidden, rng);
        let backward = (direction == Direction::Bidirectional).then(|| LstmCell::init(input_size, hidden, rng));
        Self { forward, backward }
    }

    pub fn direction(&self) -> Direction {
        if self.backward.is_some() {
            Direction::Bidirectional
        } else {
            Direction::Forward
        }
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn output_size(&self) -> usize {
        match self.direction() {
            Direction::Forward => self.hidden_size(),
            Direction::Bidirectional => 2 * self.hidden_size(),
        }
    }
}

/// Tape handles for an [`LstmCell`].
#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step over a batch. `x` is `[N×D]`; `state` is `(h, c)`, each
/// `[N×H]`, or `None` for the zero initial state. Returns `(h', c')`.
pub fn lstm_step_var(
    tape: &mut Tape,
    x: Var,
    state: Option<(Var, Var)>,
    cell: &LstmCellVars,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(cell.w_hh)[1];
    let mut gates = tape.linear(x, cell.w_ih, cell.bias)?;
    if let Some((h, _)) = state {
        let zero = tape.constant(Tensor::zeros(vec![4 * hidden])?);
        let rec = tape.linear(h, cell.w_hh, zero)?;
        gates = tape.add(gates, rec)?;
    }
    let gate = |tape: &mut Tape, g: Gate| tape.slice(gates, 1, g as usize * hidden..(g as usize + 1) * hidden);
    let i = gate(tape, Gate::Input)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, Gate::Forget)?;
    let f = tape.sigmoid(f);
    let o = gate(tape, Gate::Output)?;
    let o = tape.sigmoid(o);
    let g = gate(tape, Gate::Cell)?;
    let g = tape.tanh(g);
    let ig = tape.mul(i, g)?;
    let c_next = match state {
        Some((_, c)) => {
            let fc = tape.mul(f, c)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM over `steps` (each `[N×D]`) from a zero state; returns the
/// per-step outputs, `[N×H]` or `[N×2H]` when bidirectional.
pub fn lstm_sequence_var(
    tape: &mut Tape,
    steps: &[Var],
    forward: &LstmCellVars,
    backward: Option<&LstmCellVars>,
) -> Result<Vec<Var>> {
    let mut state = None;
    let mut outs = Vec::with_capacity(steps.len());
    for &x in steps {
        let (h, c) = lstm_step_var(tape, x, state, forward)?;
        state = Some((h, c));
        outs.push(h);
    }
    let Some(bwd) = backward else {
        return Ok(outs);
    };
    let mut state = None;
    let mut rev = vec![None; steps.len()];
    for (idx, &x) in steps.iter().enumerate().rev() {
        let (h, c) = lstm_step_var(tape, x, state, bwd)?;
        state = Some((h, c));
        rev[idx] = Some(h);
    }
    outs.into_iter()
        .zip(rev)
        .map(|(f, b)| Ok(tape.concat(&[f, b.expect("filled")], 1)?))
        .collect()
}

/// Single unbatched LSTM step: returns `(out, h', c')` with `out == h'`.
pub fn lstm_step(x: &Tensor, h: &Tensor, c: &Tensor, cell: &LstmCell) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, hid) = (cell.input_size(), cell.hidden_size());
    if x.shape() != [d] || h.shape() != [hid] || c.shape() != [hid] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_step",
            left: vec![d, hid],
            right: [x.shape(), h.shape(), c.shape()].concat(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let vars = cell.to_vars(&mut tape);
    let x = tape.constant(x.reshape(vec![1, d])?);
    let h = tape.constant(h.reshape(vec![1, hid])?);
    let c = tape.constant(c.reshape(vec![1, hid])?);
    let (h2, c2) = lstm_step_var(&mut tape, x, Some((h, c)), &vars)?;
    let h2 = tape.value(h2).reshape(vec![hid])?;
    let c2 = tape.value(c2).reshape(vec![hid])?;
    Ok((h2.clone(), h2, c2))
}
