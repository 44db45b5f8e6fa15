//! Objective, optimizer, training loop and evaluation harness.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, DataError, PatchDataset, PatchPair, SignalAsset};
use crate::dsp::{self, CubicSpline, DspError, StftConfig};
use crate::layers::{LayerError, Mode};
use crate::model::{Model, ModelError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training patches")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<LayerError> for TrainError {
    fn from(e: LayerError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Mean of `(ŷ − y)²` over all elements.
pub fn mse_loss(y_hat: &Tensor, y: &Tensor) -> std::result::Result<f64, TensorError> {
    Ok(y_hat.sub(y)?.data().iter().map(|d| d * d).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// First and second moments, shaped like the parameters.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update. A zero learning rate leaves every
/// parameter bit-identical.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        }
        .into());
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of patches held out for validation, chosen by hashing each
    /// patch's (signal, offset).
    pub validation_fraction: f64,
    pub adam: AdamConfig,
    /// Write `epoch-NNN.tflm` every epoch (the best checkpoint is always kept).
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batchSize must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validationFraction must be in [0, 1), got {}", self.validation_fraction));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        Ok(())
    }
}

/// Stacks patches into `[N, P, k]` sources and `[N, P, 1]` targets.
pub fn stack(pairs: &[&PatchPair]) -> Result<(Tensor, Tensor)> {
    let first = pairs.first().ok_or(TrainError::EmptyDataset)?;
    let cat = |f: fn(&PatchPair) -> &Tensor| -> Result<Tensor> {
        let shape = f(first).shape();
        let mut data = Vec::with_capacity(pairs.len() * f(first).len());
        for p in pairs {
            if f(p).shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: shape.to_vec(),
                    right: f(p).shape().to_vec(),
                }
                .into());
            }
            data.extend_from_slice(f(p).data());
        }
        Ok(Tensor::new(vec![pairs.len(), shape[0], shape[1]], data)?)
    };
    Ok((cat(|p| &p.source)?, cat(|p| &p.target)?))
}

/// A model and its optimizer.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    seed: u64,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig, seed: u64) -> Self {
        let adam = AdamState::new(model.params(), adam);
        Self { model, adam, seed }
    }

    /// Loss and parameter gradients of one batch in train mode, without
    /// updating anything.
    pub fn gradients(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.model.push_params(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let drop_seed = rng::derive_seed(self.seed, "dropout", self.adam.t);
        let out = self.model.forward_var(&mut tape, &vars, xv, Mode::Train, drop_seed)?;
        let loss = tape.mse(out, yv).map_err(LayerError::from)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    /// One optimizer step on `x: [N, T, k]`, `y: [N, T, 1]`; returns the
    /// pre-update loss. A non-finite loss leaves the model untouched.
    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let (loss, grads) = self.gradients(x, y)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: 0,
                step: self.adam.t,
                last_checkpoint: None,
            });
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean over validation patches, infinite values excluded.
    pub val_snr_db: Option<f64>,
    pub val_l2: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainRun {
    /// Model and training configuration as run.
    pub config: Value,
    pub seed: u64,
    pub batch_size: usize,
    pub train_patches: usize,
    pub val_patches: usize,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
}

impl TrainRun {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn is_validation(p: &PatchPair, fraction: f64) -> bool {
    let h = rng::derive_seed(0, "validation", ((p.signal as u64) << 40) ^ p.offset as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 <= fraction && fraction > 0.0
}

/// Splits patches into (train, validation) by hashing (signal, offset).
pub fn split_validation(ds: &PatchDataset, fraction: f64) -> (Vec<&PatchPair>, Vec<&PatchPair>) {
    ds.pairs.iter().partition(|p| !is_validation(p, fraction))
}

struct PatchScores {
    loss: f64,
    snr: Option<f64>,
    l2: f64,
}

fn score_patches(model: &Model, pairs: &[&PatchPair], batch: usize) -> Result<PatchScores> {
    let (mut sq, mut count, mut l2) = (0.0, 0usize, 0.0);
    let mut snrs = Vec::new();
    for chunk in pairs.chunks(batch) {
        let (x, y) = stack(chunk)?;
        let out = model.forward(&x, Mode::Eval, 0)?;
        let t = y.shape()[1];
        for (o, r) in out.data().chunks_exact(t).zip(y.data().chunks_exact(t)) {
            let e: f64 = o.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            sq += e;
            count += t;
            l2 += e.sqrt();
            if let Ok(s) = dsp::snr(o, r) {
                snrs.push(s);
            }
        }
    }
    let finite: Vec<f64> = snrs.into_iter().filter(|s| s.is_finite()).collect();
    Ok(PatchScores {
        loss: sq / count as f64,
        snr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        l2: l2 / pairs.len() as f64,
    })
}

/// Where training checkpoints go and what to record beside the config.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub extras: Map<String, Value>,
}

/// Trains `model` on `dataset`. With a sink, checkpoints go to its
/// directory: one per epoch when enabled and `best.tflm` at the lowest
/// validation loss (training loss when nothing is held out).
pub fn train(model: Model, dataset: &PatchDataset, cfg: &TrainConfig, sink: Option<&CheckpointSink>) -> Result<(Model, TrainRun)> {
    cfg.validate()?;
    let (train_set, val_set) = split_validation(dataset, cfg.validation_fraction);
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut run = TrainRun {
        config: serde_json::json!({ "model": model.config(), "train": cfg }),
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        train_patches: train_set.len(),
        val_patches: val_set.len(),
        steps: 0,
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        best_checkpoint: None,
        best_epoch: None,
    };
    let mut trainer = Trainer::new(model, cfg.adam, cfg.seed);
    let mut best = f64::INFINITY;
    let mut last_good: Option<PathBuf> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatchPair> = idx.iter().map(|&i| train_set[i]).collect();
            let (x, y) = stack(&batch)?;
            let loss = trainer.step(&x, &y).map_err(|e| match e {
                TrainError::NonFiniteLoss { step, .. } => TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_checkpoint: last_good.clone(),
                },
                other => other,
            })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(score_patches(&trainer.model, &val_set, cfg.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.as_ref().map(|v| v.loss),
            val_snr_db: val.as_ref().and_then(|v| v.snr),
            val_l2: val.as_ref().map(|v| v.l2),
            seconds: started.elapsed().as_secs_f64(),
        };
        let criterion = record.val_loss.unwrap_or(train_loss);
        if let Some(CheckpointSink { dir, extras }) = sink {
            let mut extras = extras.clone();
            extras.insert("epoch".into(), Value::from(epoch));
            extras.insert("trainLoss".into(), Value::from(train_loss));
            if let Some(v) = record.val_loss {
                extras.insert("valLoss".into(), Value::from(v));
            }
            if cfg.checkpoint_every_epoch {
                let path = dir.join(format!("epoch-{epoch:03}.tflm"));
                checkpoint::save(&path, &trainer.model, &extras)?;
                run.checkpoints.push(path.clone());
                last_good = Some(path);
            }
            if criterion < best {
                let path = dir.join("best.tflm");
                checkpoint::save(&path, &trainer.model, &extras)?;
                run.best_checkpoint = Some(path.clone());
                last_good.get_or_insert(path);
            }
        }
        if criterion < best {
            best = criterion;
            run.best_epoch = Some(epoch);
        }
        run.epochs.push(record);
    }
    run.steps = trainer.adam.t;
    Ok((trainer.model, run))
}

// ---------------------------------------------------------------------------
// Tasks

/// What the network learns to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase", deny_unknown_fields)]
pub enum Task {
    /// Input: the signal degraded by `ratio` and spline-upscaled back.
    SuperResolution { ratio: usize },
    /// Input: channel 0 with a `rate` share of samples zeroed.
    Imputation { rate: f64 },
}

impl Default for Task {
    fn default() -> Self {
        Task::SuperResolution { ratio: 2 }
    }
}

impl Task {
    /// `(input, target)` signals. Imputation masks signal `i` with stream
    /// `("mask", i)` of `seed`.
    pub fn pairs(&self, signals: &[SignalAsset], seed: u64) -> Result<Vec<(SignalAsset, SignalAsset)>> {
        signals
            .iter()
            .enumerate()
            .map(|(i, y)| match *self {
                Task::SuperResolution { ratio } => Ok(data::make_pairs(y, ratio)?),
                Task::Imputation { rate } => {
                    let target = SignalAsset::mono(y.sample_rate, y.channel(0), y.provenance.clone())?;
                    let mask_seed = rng::derive_seed(seed, "mask", i as u64);
                    let (masked, _) = data::zero_mask(&target.channel(0), rate, mask_seed)?;
                    let mut prov = y.provenance.clone();
                    prov.steps.push(serde_json::json!({"op": "zeroMask", "rate": rate, "seed": mask_seed}));
                    Ok((SignalAsset::mono(y.sample_rate, masked, prov)?, target))
                }
            })
            .collect()
    }

    /// Evaluation items with the same inputs as [`Task::pairs`].
    pub fn eval_items(&self, signals: &[SignalAsset], seed: u64) -> Result<Vec<EvalItem>> {
        match *self {
            Task::SuperResolution { .. } => Ok(self
                .pairs(signals, seed)?
                .iter()
                .map(|(x, y)| EvalItem::super_resolution(x, y))
                .collect()),
            Task::Imputation { rate } => signals
                .iter()
                .enumerate()
                .map(|(i, y)| EvalItem::imputation(&y.channel(0), rate, rng::derive_seed(seed, "mask", i as u64)))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Report columns, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Spline,
    Conv,
    Full,
}

impl Method {
    /// `Full` when the model uses TFiLM, `Conv` otherwise.
    pub fn of(model: &Model) -> Self {
        if model.config().use_tfilm {
            Method::Full
        } else {
            Method::Conv
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Snr,
    Lsd,
    L2,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "snr" => Ok(Metric::Snr),
            "lsd" => Ok(Metric::Lsd),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric {other:?} (expected snr, lsd or l2)")),
        }
    }
}

/// One series to evaluate: the model input, the reference, and the
/// model-free baseline reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    /// `[T, k]`.
    pub input: Tensor,
    pub target: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Imputation positions; empty for super-resolution.
    pub mask: Vec<usize>,
}

impl EvalItem {
    /// Super-resolution: the spline-upscaled input is its own baseline.
    pub fn super_resolution(x: &SignalAsset, y: &SignalAsset) -> Self {
        Self {
            input: x.samples().clone(),
            target: y.channel(0),
            baseline: x.channel(0),
            mask: Vec::new(),
        }
    }

    /// Imputation: the zero-masked series is the input; the baseline is a
    /// natural cubic spline through the unmasked samples.
    pub fn imputation(series: &[f64], rate: f64, seed: u64) -> Result<Self> {
        let (masked, mask) = data::zero_mask(series, rate, seed)?;
        let baseline = spline_fill(&masked, &mask)?;
        Ok(Self {
            input: Tensor::new(vec![masked.len(), 1], masked)?,
            target: series.to_vec(),
            baseline,
            mask,
        })
    }
}

/// Replaces the masked positions (sorted) by a natural cubic spline through
/// the others. With fewer than two known points the known value (or zero)
/// is held.
pub fn spline_fill(x: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    let mut known = Vec::with_capacity(x.len() - mask.len());
    let mut m = mask.iter().peekable();
    for i in 0..x.len() {
        if m.peek() == Some(&&i) {
            m.next();
        } else {
            known.push(i);
        }
    }
    let mut out = x.to_vec();
    match known.len() {
        0 => {}
        1 => mask.iter().for_each(|&i| out[i] = x[known[0]]),
        _ => {
            let xs: Vec<f64> = known.iter().map(|&i| i as f64).collect();
            let ys: Vec<f64> = known.iter().map(|&i| x[i]).collect();
            let s = CubicSpline::new(&xs, &ys)?;
            for &i in mask {
                out[i] = s.eval(i as f64);
            }
        }
    }
    Ok(out)
}

/// Runs `model` over a `[T, k]` series in windows of its patch length; a
/// final window aligned to the end covers any remainder.
pub fn predict(model: &Model, input: &Tensor) -> Result<Vec<f64>> {
    let p = model.config().patch_length;
    let (t, k) = (input.shape()[0], input.shape()[1]);
    if t < p {
        return Err(ModelError::LengthInvariantViolation {
            len: t,
            reason: format!("series is shorter than the model's patch length {p}"),
        }
        .into());
    }
    let mut offsets: Vec<usize> = (0..=t - p).step_by(p).collect();
    if t % p != 0 {
        offsets.push(t - p);
    }
    let mut out = vec![0.0; t];
    for chunk in offsets.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * p * k);
        for &o in chunk {
            data.extend_from_slice(&input.data()[o * k..(o + p) * k]);
        }
        let y = model.forward(&Tensor::new(vec![chunk.len(), p, k], data)?, Mode::Eval, 0)?;
        for (&o, w) in chunk.iter().zip(y.data().chunks_exact(p)) {
            out[o..o + p].copy_from_slice(w);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PairMetrics {
    /// `None` for an all-zero reference.
    pub snr_db: Option<f64>,
    pub lsd: Option<f64>,
    /// Euclidean norm of the error over the whole series.
    pub l2: Option<f64>,
    /// Same, restricted to masked positions.
    pub masked_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MethodSummary {
    pub method: Method,
    pub pairs: usize,
    /// Mean over pairs of finite dB values.
    pub snr_db: Option<f64>,
    /// Pairs with an exact reconstruction, left out of the mean.
    pub snr_infinite: usize,
    pub lsd: Option<f64>,
    pub l2: Option<f64>,
    pub masked_l2: Option<f64>,
    pub per_pair: Vec<PairMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MethodSummary {
    fn from_pairs(method: Method, per_pair: Vec<PairMetrics>) -> Self {
        let snr_infinite = per_pair.iter().filter(|m| m.snr_db == Some(f64::INFINITY)).count();
        Self {
            method,
            pairs: per_pair.len(),
            snr_db: mean(per_pair.iter().filter_map(|m| m.snr_db).filter(|s| s.is_finite())),
            snr_infinite,
            lsd: mean(per_pair.iter().filter_map(|m| m.lsd)),
            l2: mean(per_pair.iter().filter_map(|m| m.l2)),
            masked_l2: mean(per_pair.iter().filter_map(|m| m.masked_l2)),
            per_pair,
        }
    }
}

/// LSD frames are 8192 samples, or the largest power of two that fits.
fn lsd_config(len: usize) -> StftConfig {
    let n = if len >= 8192 { 8192 } else { 1 << (usize::BITS - 1 - len.leading_zeros()) };
    StftConfig::new(n)
}

pub fn pair_metrics(estimate: &[f64], item: &EvalItem, metrics: &[Metric]) -> Result<PairMetrics> {
    let y = &item.target;
    let l2 = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| (estimate[i] - y[i]).powi(2)).sum::<f64>().sqrt();
    Ok(PairMetrics {
        snr_db: match metrics.contains(&Metric::Snr) {
            true => match dsp::snr(estimate, y) {
                Ok(s) => Some(s),
                Err(DspError::ZeroReference) => None,
                Err(e) => return Err(e.into()),
            },
            false => None,
        },
        lsd: match metrics.contains(&Metric::Lsd) {
            true => Some(dsp::lsd(estimate, y, &lsd_config(y.len()))?),
            false => None,
        },
        l2: metrics.contains(&Metric::L2).then(|| l2(&mut (0..y.len()))),
        masked_l2: (metrics.contains(&Metric::L2) && !item.mask.is_empty())
            .then(|| l2(&mut item.mask.iter().copied())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Sorted by [`Method`].
    pub rows: Vec<MethodSummary>,
}

impl EvalReport {
    pub fn row(&self, method: Method) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Adds rows of `other` for methods not already present.
    pub fn merge(mut self, other: EvalReport) -> Self {
        for r in other.rows {
            if self.row(r.method).is_none() {
                self.rows.push(r);
            }
        }
        self.rows.sort_by_key(|r| r.method);
        self
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("method,pairs,snr_db,snr_infinite,lsd,l2,masked_l2\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.pairs,
                cell(r.snr_db),
                r.snr_infinite,
                cell(r.lsd),
                cell(r.l2),
                cell(r.masked_l2)
            ));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}", "method", "pairs", "SNR dB", "LSD", "L2", "masked L2")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}",
                r.method.to_string(),
                r.pairs,
                cell(r.snr_db),
                cell(r.lsd),
                cell(r.l2),
                cell(r.masked_l2)
            )?;
        }
        let inf: usize = self.rows.iter().map(|r| r.snr_infinite).sum();
        if inf > 0 {
            writeln!(f, "({inf} exact reconstructions with infinite SNR excluded from means)")?;
        }
        Ok(())
    }
}

/// Metrics of the spline baseline alone.
pub fn evaluate_baseline(items: &[EvalItem], metrics: &[Metric]) -> Result<EvalReport> {
    let per = items
        .iter()
        .map(|it| pair_metrics(&it.baseline, it, metrics))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        rows: vec![MethodSummary::from_pairs(Method::Spline, per)],
    })
}

/// Spline baseline and `model` side by side.
pub fn evaluate(model: &Model, items: &[EvalItem], metrics: &[Metric]) -> Result<EvalReport> {
    let per = items
        .iter()
        .map(|it| pair_metrics(&predict(model, &it.input)?, it, metrics))
        .collect::<Result<_>>()?;
    let model_row = EvalReport {
        rows: vec![MethodSummary::from_pairs(Method::of(model), per)],
    };
    Ok(evaluate_baseline(items, metrics)?.merge(model_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::model::{build_model, ModelConfig};

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[1.0, 2.0, 3.0]), &t(&[0.0, 1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(mse_loss(&t(&[0.0, 2.0]), &t(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(mse_loss(&t(&[0.0]), &t(&[0.0, 0.0])).is_err());
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = vec![t(&[1.5, -2.0])];
        let mut s = AdamState::new(&p, adam(0.1));
        adam_step(&mut p, &[t(&[0.0, 0.0])], &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        assert_eq!(s.t, 1);

        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, adam(0.1));
        adam_step(&mut p, &[Tensor::scalar(2.0)], &mut s).unwrap();
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_parabola() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p, adam(0.1));
        for _ in 0..200 {
            let g = p[0].scale(2.0);
            adam_step(&mut p, &[g], &mut s).unwrap();
        }
        assert!(p[0].data()[0].abs() < 0.05, "{}", p[0].data()[0]);
    }

    #[test]
    fn adam_rejects_misaligned() {
        let mut p = vec![t(&[1.0, 2.0])];
        let mut s = AdamState::new(&p, adam(0.1));
        assert!(adam_step(&mut p, &[t(&[1.0])], &mut s).is_err());
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            patch_length: 64,
            channel_cap: 8,
            blocks_per_tfilm: 4,
            dropout_rate: 0.2,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(signals: usize) -> PatchDataset {
        let pairs: Vec<_> = (0..signals)
            .map(|s| {
                let y: Vec<f64> = (0..256).map(|i| ((i + 17 * s) as f64 * 0.21).sin()).collect();
                let x: Vec<f64> = y.iter().map(|v| 0.8 * v).collect();
                (
                    SignalAsset::mono(0, x, Provenance::default()).unwrap(),
                    SignalAsset::mono(0, y, Provenance::default()).unwrap(),
                )
            })
            .collect();
        PatchDataset::from_signals(&pairs, 64, 32, 0).unwrap()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            seed: 5,
            adam: adam(lr),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let model = build_model(&tiny_cfg(), 1).unwrap();
        let (after, run) = train(model.clone(), &tiny_dataset(2), &cfg(2, 0.0), None).unwrap();
        assert_eq!(after, model);
        assert_eq!(run.epochs.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = tiny_dataset(3);
        let model = build_model(&tiny_cfg(), 1).unwrap();
        let (m1, r1) = train(model.clone(), &ds, &cfg(3, 1e-3), None).unwrap();
        let (m2, r2) = train(model, &ds, &cfg(3, 1e-3), None).unwrap();
        assert_eq!(m1, m2);
        let (h1, h2) = (r1.loss_history(), r2.loss_history());
        assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(h1[2] < h1[0], "{h1:?}");
        assert_eq!(r1.train_patches + r1.val_patches, ds.len());
        assert_eq!(r1.steps as usize, 3 * r1.train_patches.div_ceil(4));
    }

    #[test]
    fn every_trainable_layer_receives_gradient() {
        let mut c = tiny_cfg();
        c.dropout_rate = 0.0;
        // Perturb zero-initialized tensors so every path carries signal.
        let mut model = build_model(&c, 2).unwrap();
        for p in model.params_mut() {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.01 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        let before = model.clone();
        let ds = tiny_dataset(1);
        let refs: Vec<&PatchPair> = ds.pairs.iter().take(4).collect();
        let (x, y) = stack(&refs).unwrap();
        let mut tr = Trainer::new(model, adam(1e-3), 0);
        tr.step(&x, &y).unwrap();
        for (a, b) in before.params().iter().zip(tr.model.params()) {
            assert_ne!(a.data(), b.data(), "{} did not change", a.name().unwrap());
        }
    }

    #[test]
    fn checkpoints_written_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&tiny_cfg(), 1).unwrap();
        let ds = tiny_dataset(3);
        let sink = CheckpointSink {
            dir: dir.path().join("checkpoints"),
            extras: Map::new(),
        };
        let (m, run) = train(model, &ds, &cfg(2, 1e-3), Some(&sink)).unwrap();
        assert_eq!(run.checkpoints.len(), 2);
        assert!(run.checkpoints.iter().all(|p| p.exists()));
        let best = run.best_checkpoint.unwrap();
        assert!(best.exists());
        let (last, extras) = checkpoint::load(&run.checkpoints[1]).unwrap();
        assert_eq!(last, m.rounded_to_f32());
        assert_eq!(extras["epoch"], 2);
    }

    #[test]
    fn empty_and_non_finite() {
        let model = build_model(&tiny_cfg(), 1).unwrap();
        let empty = PatchDataset {
            pairs: Vec::new(),
            patch_length: 64,
            stride: 32,
            shuffle_seed: 0,
        };
        assert!(matches!(train(model.clone(), &empty, &cfg(1, 1e-3), None), Err(TrainError::EmptyDataset)));

        let mut ds = tiny_dataset(1);
        ds.pairs[0].target.data_mut()[3] = f64::NAN;
        let mut c = cfg(1, 1e-3);
        c.validation_fraction = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let sink = CheckpointSink {
            dir: dir.path().join("checkpoints"),
            extras: Map::new(),
        };
        let err = train(model, &ds, &c, Some(&sink)).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 1, .. }), "{err}");
        assert!(!dir.path().join("checkpoints").exists());
    }

    #[test]
    fn identity_model_matches_input_snr() {
        let model = build_model(&tiny_cfg(), 3).unwrap();
        let y = SignalAsset::mono(0, (0..200).map(|i| (i as f64 * 0.1).sin()).collect(), Provenance::default()).unwrap();
        let x = SignalAsset::mono(0, y.channel(0).iter().map(|v| v * 0.9 + 0.01).collect(), Provenance::default()).unwrap();
        let items = vec![EvalItem::super_resolution(&x, &y)];
        let report = evaluate(&model, &items, &[Metric::Snr, Metric::L2, Metric::Lsd]).unwrap();
        let methods: Vec<_> = report.rows.iter().map(|r| r.method).collect();
        assert_eq!(methods, [Method::Spline, Method::Full]);
        let (s, f) = (&report.rows[0], &report.rows[1]);
        assert_eq!(s.snr_db, f.snr_db);
        assert_eq!(s.l2, f.l2);
        assert_eq!(s.lsd, f.lsd);
        let csv = report.to_csv();
        assert!(csv.starts_with("method,pairs,snr_db"));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').next(), Some("Spline"));
    }

    #[test]
    fn infinite_snr_excluded_from_mean() {
        let y: Vec<f64> = (0..64).map(|i| (i as f64).cos()).collect();
        let exact = EvalItem {
            input: Tensor::new(vec![64, 1], y.clone()).unwrap(),
            target: y.clone(),
            baseline: y.clone(),
            mask: Vec::new(),
        };
        let noisy = EvalItem {
            baseline: y.iter().map(|v| v * 0.5).collect(),
            ..exact.clone()
        };
        let r = evaluate_baseline(&[exact, noisy], &[Metric::Snr]).unwrap();
        let row = r.row(Method::Spline).unwrap();
        assert_eq!(row.snr_infinite, 1);
        // ‖y‖² / ‖y/2‖² = 4.
        assert!((row.snr_db.unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(r.to_string().contains("infinite SNR excluded"));
    }

    #[test]
    fn spline_fill_interpolates_masked_points() {
        let x: Vec<f64> = (0..20).map(|i| 2.0 * i as f64 + 1.0).collect();
        let item = EvalItem::imputation(&x, 0.3, 4).unwrap();
        assert!(!item.mask.is_empty());
        for (a, b) in item.baseline.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(spline_fill(&[0.0, 5.0, 0.0], &[0, 2]).unwrap(), [5.0, 5.0, 5.0]);
    }

    #[test]
    fn task_inputs_agree_between_training_and_evaluation() {
        let sig: Vec<SignalAsset> = (0..2)
            .map(|s| SignalAsset::mono(0, (0..64).map(|i| 5.0 + ((i * (s + 1)) as f64).sin()).collect(), Provenance::default()).unwrap())
            .collect();
        let task = Task::Imputation { rate: 0.3 };
        let pairs = task.pairs(&sig, 9).unwrap();
        let items = task.eval_items(&sig, 9).unwrap();
        for ((x, y), it) in pairs.iter().zip(&items) {
            assert_eq!(x.samples(), &it.input);
            assert_eq!(y.channel(0), it.target);
            assert!(it.mask.iter().all(|&i| x.channel(0)[i] == 0.0));
        }
        let json = serde_json::to_string(&Task::SuperResolution { ratio: 4 }).unwrap();
        assert_eq!(json, r#"{"kind":"superResolution","ratio":4}"#);
    }

    #[test]
    fn predict_covers_ragged_tail() {
        let model = build_model(&tiny_cfg(), 3).unwrap();
        let x = Tensor::from_fn(vec![150, 1], |i| (i as f64 * 0.2).sin()).unwrap();
        // Identity at init: the prediction is the input everywhere.
        assert_eq!(predict(&model, &x).unwrap(), x.data());
        let short = Tensor::zeros(vec![10, 1]).unwrap();
        assert!(predict(&model, &short).is_err());
    }
}
