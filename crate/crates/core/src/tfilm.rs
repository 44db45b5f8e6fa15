//! Temporal feature-wise linear modulation.
//!
//! A TFiLM layer splits `[N, T, C]` activations into `T/B` blocks of `B`
//! steps, max-pools each block to one `C`-vector, runs an LSTM over the pooled
//! blocks in temporal order and projects each hidden state to a per-block
//! scale `γ` and shift `β`. Every activation in block `b` becomes
//! `γ[b]·F + β[b]`.

use rand::Rng;

use crate::autodiff::{OpContext, Operation, Tape, Var};
use crate::layers::{self, Direction, LayerError, LstmCellVars, LstmParams, Result};
use crate::tensor::{Tensor, TensorError};

/// Parameters of one TFiLM layer.
///
/// The projection maps the LSTM output (width `H`, or `2H` when
/// bidirectional) to `2C` values: `γ = 1 + first C`, `β = last C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfilmLayerParams {
    pub block_len: usize,
    pub channels: usize,
    pub lstm: LstmParams,
    /// `[2C × lstm output width]`.
    pub proj_w: Tensor,
    /// `[2C]`.
    pub proj_b: Tensor,
    /// Intermediate pooling extent and stride. A block-wide max over the
    /// intermediate maxima equals the block-wide max of the raw block, so
    /// these only need to be valid, not applied separately.
    pub pool: (usize, usize),
}

impl TfilmLayerParams {
    /// LSTM initialized randomly, projection zeroed: the layer starts as the
    /// identity map.
    pub fn init(channels: usize, block_len: usize, hidden: usize, direction: Direction, rng: &mut impl Rng) -> Self {
        let lstm = LstmParams::init(channels, hidden, direction, rng);
        let width = lstm.output_size();
        Self {
            block_len,
            channels,
            proj_w: Tensor::zeros(vec![2 * channels, width]).expect("positive extents"),
            proj_b: Tensor::zeros(vec![2 * channels]).expect("positive extents"),
            lstm,
            pool: (2, 2),
        }
    }

    pub fn direction(&self) -> Direction {
        self.lstm.direction()
    }

    pub fn param_count(&self) -> usize {
        self.lstm.forward.param_count()
            + self.lstm.backward.as_ref().map_or(0, |c| c.param_count())
            + self.proj_w.len()
            + self.proj_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.lstm.output_size();
        if self.block_len == 0 {
            return Err(LayerError::InvalidArgument("TFiLM block length must be at least 1".into()));
        }
        if self.pool.0 == 0 || self.pool.1 == 0 {
            return Err(LayerError::InvalidArgument(format!(
                "TFiLM pooling extent/stride must be positive, got {:?}",
                self.pool
            )));
        }
        if self.lstm.input_size() != self.channels {
            return Err(LayerError::ChannelMismatch {
                expected: self.channels,
                got: self.lstm.input_size(),
            });
        }
        if self.proj_w.shape() != [2 * self.channels, width] || self.proj_b.shape() != [2 * self.channels] {
            return Err(TensorError::ShapeMismatch {
                op: "tfilm projection",
                left: vec![2 * self.channels, width],
                right: [self.proj_w.shape(), self.proj_b.shape()].concat(),
            }
            .into());
        }
        Ok(())
    }

    /// Pushes the parameters onto `tape` as trainable leaves.
    pub fn to_vars(&self, tape: &mut Tape) -> TfilmVars {
        TfilmVars {
            block_len: self.block_len,
            forward: self.lstm.forward.to_vars(tape),
            backward: self.lstm.backward.as_ref().map(|c| c.to_vars(tape)),
            proj_w: tape.param(self.proj_w.clone()),
            proj_b: tape.param(self.proj_b.clone()),
        }
    }
}

/// Tape handles for a TFiLM layer.
#[derive(Debug, Clone, Copy)]
pub struct TfilmVars {
    pub block_len: usize,
    pub forward: LstmCellVars,
    pub backward: Option<LstmCellVars>,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Intermediate tape values of one TFiLM application.
#[derive(Debug, Clone, Copy)]
pub struct TfilmTraceVars {
    /// `[N·nb, B, C]`.
    pub blocks: Var,
    /// `[N, nb, C]`.
    pub pooled: Var,
    /// `[N·nb, C]` each.
    pub gamma: Var,
    pub beta: Var,
    /// `[N, T, C]`.
    pub output: Var,
}

/// `y[m,t,c] = γ[m,c]·x[m,t,c] + β[m,c]` for `x: [M, B, C]`, `γ, β: [M, C]`.
pub fn modulate(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (m, b, c) = modulate_dims(x, gamma, beta)?;
    let mut out = vec![0.0; x.len()];
    for mm in 0..m {
        let g = &gamma.data()[mm * c..(mm + 1) * c];
        let s = &beta.data()[mm * c..(mm + 1) * c];
        for t in 0..b {
            let off = (mm * b + t) * c;
            for cc in 0..c {
                out[off + cc] = g[cc] * x.data()[off + cc] + s[cc];
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

fn modulate_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let [m, b, c] = *x.shape() else {
        return Err(LayerError::InvalidArgument(format!(
            "modulate expects [M, B, C] blocks, got {:?}",
            x.shape()
        )));
    };
    if gamma.shape() != [m, c] || beta.shape() != [m, c] {
        return Err(TensorError::ShapeMismatch {
            op: "modulate",
            left: x.shape().to_vec(),
            right: [gamma.shape(), beta.shape()].concat(),
        }
        .into());
    }
    Ok((m, b, c))
}

#[derive(Debug)]
struct ModulateOp;

impl Operation for ModulateOp {
    fn name(&self) -> &'static str {
        "modulate"
    }

    fn backward(&self, ctx: &OpContext<'_>, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let [m, b, c] = *x.shape() else { unreachable!("checked in forward") };
        let mut dx = vec![0.0; x.len()];
        let mut dg = vec![0.0; m * c];
        let mut db = vec![0.0; m * c];
        for mm in 0..m {
            for t in 0..b {
                let off = (mm * b + t) * c;
                for cc in 0..c {
                    let g = grad.data()[off + cc];
                    dx[off + cc] = gamma.data()[mm * c + cc] * g;
                    dg[mm * c + cc] += x.data()[off + cc] * g;
                    db[mm * c + cc] += g;
                }
            }
        }
        vec![
            Some(Tensor::new(x.shape().to_vec(), dx).expect("shape")),
            Some(Tensor::new(vec![m, c], dg).expect("shape")),
            Some(Tensor::new(vec![m, c], db).expect("shape")),
        ]
    }
}

fn modulate_var(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = modulate(tape.value(x), tape.value(gamma), tape.value(beta))?;
    Ok(tape.push(ModulateOp, &[x, gamma, beta], y))
}

/// Records a TFiLM layer on the tape, keeping handles to its intermediates.
pub fn tfilm_traced(tape: &mut Tape, x: Var, p: &TfilmVars) -> Result<TfilmTraceVars> {
    let shape = tape.shape(x).to_vec();
    let [n, t, c] = shape[..] else {
        return Err(LayerError::InvalidArgument(format!(
            "TFiLM expects [N, T, C] activations, got {shape:?}"
        )));
    };
    let b = p.block_len;
    if b == 0 || t % b != 0 {
        return Err(TensorError::NonDivisibleLength { len: t, block: b }.into());
    }
    let nb = t / b;

    // [N, T, C] and [N·nb, B, C] share one row-major layout.
    let blocks = tape.reshape(x, vec![n * nb, b, c])?;
    let pooled = layers::maxpool1d_var(tape, blocks, b, b)?;
    let pooled = tape.reshape(pooled, vec![n, nb, c])?;

    let steps = (0..nb)
        .map(|i| {
            let s = tape.slice(pooled, 1, i..i + 1)?;
            tape.reshape(s, vec![n, c])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let hidden = layers::lstm_sequence_var(tape, &steps, &p.forward, p.backward.as_ref())?;
    let width = tape.shape(hidden[0])[1];
    let hidden = hidden
        .into_iter()
        .map(|h| tape.reshape(h, vec![n, 1, width]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let hidden = tape.concat(&hidden, 1)?;
    let hidden = tape.reshape(hidden, vec![n * nb, width])?;

    let proj = tape.linear(hidden, p.proj_w, p.proj_b)?;
    let gamma = tape.slice(proj, 1, 0..c)?;
    let gamma = tape.add_scalar(gamma, 1.0);
    let beta = tape.slice(proj, 1, c..2 * c)?;

    let normed = modulate_var(tape, blocks, gamma, beta)?;
    let output = tape.reshape(normed, vec![n, t, c])?;
    Ok(TfilmTraceVars {
        blocks,
        pooled,
        gamma,
        beta,
        output,
    })
}

pub fn tfilm_var(tape: &mut Tape, x: Var, p: &TfilmVars) -> Result<Var> {
    Ok(tfilm_traced(tape, x, p)?.output)
}

/// Applies a TFiLM layer to `[N, T, C]` activations; `T` must be a multiple
/// of the block length.
pub fn tfilm_forward(x: &Tensor, p: &TfilmLayerParams) -> Result<Tensor> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.to_vars(&mut tape);
    let x = tape.constant(x.clone());
    let y = tfilm_var(&mut tape, x, &vars)?;
    Ok(tape.value(y).clone())
}

/// Intermediate tensors of one TFiLM application, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct TfilmTrace {
    pub blocks: Tensor,
    pub pooled: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub output: Tensor,
}

pub fn tfilm_trace(x: &Tensor, p: &TfilmLayerParams) -> Result<TfilmTrace> {
    p.validate()?;
    let mut tape = Tape::new();
    let vars = p.to_vars(&mut tape);
    let x = tape.constant(x.clone());
    let tr = tfilm_traced(&mut tape, x, &vars)?;
    Ok(TfilmTrace {
        blocks: tape.value(tr.blocks).clone(),
        pooled: tape.value(tr.pooled).clone(),
        gamma: tape.value(tr.gamma).clone(),
        beta: tape.value(tr.beta).clone(),
        output: tape.value(tr.output).clone(),
    })
}

/// Adds `delta` to every input sample of block `block` and returns the
/// earliest output block that changes, if any. With a unidirectional LSTM
/// the answer is `block` itself: the modulation of a block depends only on
/// that block and its predecessors.
pub fn tfilm_causality_probe(x: &Tensor, p: &TfilmLayerParams, block: usize, delta: f64) -> Result<Option<usize>> {
    let [n, t, c] = *x.shape() else {
        return Err(LayerError::InvalidArgument(format!(
            "TFiLM expects [N, T, C] activations, got {:?}",
            x.shape()
        )));
    };
    let b = p.block_len;
    if b == 0 || t % b != 0 {
        return Err(TensorError::NonDivisibleLength { len: t, block: b }.into());
    }
    let nb = t / b;
    if block >= nb {
        return Err(LayerError::InvalidArgument(format!(
            "block {block} out of range for {nb} blocks"
        )));
    }
    let mut bumped = x.data().to_vec();
    for nn in 0..n {
        for tt in block * b..(block + 1) * b {
            let off = (nn * t + tt) * c;
            bumped[off..off + c].iter_mut().for_each(|v| *v += delta);
        }
    }
    let base = tfilm_forward(x, p)?;
    let moved = tfilm_forward(&Tensor::new(x.shape().to_vec(), bumped)?, p)?;
    let differs = |blk: usize| {
        (0..n).any(|nn| {
            let lo = (nn * t + blk * b) * c;
            let hi = lo + b * c;
            base.data()[lo..hi]
                .iter()
                .zip(&moved.data()[lo..hi])
                .any(|(u, v)| u.to_bits() != v.to_bits())
        })
    };
    Ok((0..nb).find(|&blk| differs(blk)))
}
