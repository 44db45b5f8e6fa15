//! The super-resolution network: `K` downsampling blocks, a bottleneck, `K`
//! upsampling blocks with stacked skip connections, a subpixel output stage
//! and an additive residual from the input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::layers::{self, ConvGeometry, Direction, LayerError, LstmCell, LstmCellVars, Mode, Padding};
use crate::rng;
use crate::tensor::Tensor;
use crate::tfilm::{self, TfilmVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration invalid: {0}")]
    ConfigInvariantViolation(String),
    #[error("input length {len} invalid: {reason}")]
    LengthInvariantViolation { len: usize, reason: String },
    #[error("expected {expected} input channels, got {got}")]
    InputChannels { expected: usize, got: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of downsampling (and upsampling) blocks, `K`.
    pub blocks: usize,
    pub input_channels: usize,
    pub patch_length: usize,
    /// Blocks per TFiLM layer; each layer's block length is its time length
    /// divided by this.
    pub blocks_per_tfilm: usize,
    /// Bottleneck dropout.
    pub dropout_rate: f64,
    /// Dropout inside down/up blocks.
    pub block_dropout: f64,
    pub dilation: usize,
    /// Upper bound on any layer's filter count; `512` gives the reference
    /// architecture, small even values give desk-scale models.
    pub channel_cap: usize,
    pub use_tfilm: bool,
    pub use_skip_stacking: bool,
    pub use_additive_residual: bool,
    pub bidirectional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            input_channels: 1,
            patch_length: 8192,
            blocks_per_tfilm: 32,
            dropout_rate: 0.5,
            block_dropout: 0.0,
            dilation: 2,
            channel_cap: 512,
            use_tfilm: true,
            use_skip_stacking: true,
            use_additive_residual: true,
            bidirectional: false,
        }
    }
}

fn violation(msg: String) -> ModelError {
    ModelError::ConfigInvariantViolation(msg)
}

impl ModelConfig {
    pub fn down_filters(&self, d: usize) -> usize {
        (1usize << (6 + d)).min(512).min(self.channel_cap)
    }

    pub fn down_kernel(d: usize) -> usize {
        if d >= 7 {
            9
        } else {
            ((1usize << (7 - d)) + 1).max(9)
        }
    }

    pub fn bottleneck_filters(&self) -> usize {
        512.min(self.channel_cap)
    }

    /// Upsampling block `u` mirrors downsampling depth `K − u + 1`.
    pub fn up_filters(&self, u: usize) -> usize {
        let m = self.blocks - u + 1;
        (1usize << (7 + m).min(20)).min(512).min(self.channel_cap)
    }

    pub fn up_kernel(&self, u: usize) -> usize {
        Self::down_kernel(self.blocks - u + 1)
    }

    pub fn direction(&self) -> Direction {
        if self.bidirectional {
            Direction::Bidirectional
        } else {
            Direction::Forward
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(violation("inputChannels must be at least 1".into()));
        }
        if self.channel_cap < 2 || self.channel_cap % 2 != 0 {
            return Err(violation(format!(
                "channelCap must be even and at least 2 (subpixel halves channels), got {}",
                self.channel_cap
            )));
        }
        if self.dilation == 0 {
            return Err(violation("dilation must be at least 1".into()));
        }
        for (name, rate) in [("dropoutRate", self.dropout_rate), ("blockDropout", self.block_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(violation(format!("{name} must be in [0, 1), got {rate}")));
            }
        }
        if self.blocks > 16 {
            return Err(violation(format!("blocks = {} is unreasonably deep", self.blocks)));
        }
        self.check_length(self.patch_length).map_err(|e| match e {
            ModelError::LengthInvariantViolation { reason, .. } => {
                violation(format!("patchLength {}: {reason}", self.patch_length))
            }
            other => other,
        })
    }

    /// Time lengths at the output of each down block and of the bottleneck.
    pub fn encoder_lengths(&self, t: usize) -> Vec<usize> {
        let stages = if self.blocks == 0 { 0 } else { self.blocks + 1 };
        (1..=stages).map(|i| t >> i).collect()
    }

    pub fn check_length(&self, t: usize) -> Result<()> {
        let factor = 1usize << (self.blocks + 1);
        if t == 0 || t % factor != 0 {
            return Err(ModelError::LengthInvariantViolation {
                len: t,
                reason: format!("must be a positive multiple of 2^(K+1) = {factor}"),
            });
        }
        if self.use_tfilm && self.blocks > 0 {
            if self.blocks_per_tfilm == 0 {
                return Err(violation("blocksPerTfilm must be at least 1".into()));
            }
            for tl in self.encoder_lengths(t) {
                if tl % self.blocks_per_tfilm != 0 {
                    return Err(ModelError::LengthInvariantViolation {
                        len: t,
                        reason: format!(
                            "TFiLM layer length {tl} is not divisible into {} blocks",
                            self.blocks_per_tfilm
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Down(usize),
    Bottleneck,
    Up(usize),
    Final,
}

/// Parameter indices of a TFiLM layer inside [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct TfilmSlots {
    pub channels: usize,
    pub hidden: usize,
    forward: [usize; 3],
    backward: Option<[usize; 3]>,
    proj_w: usize,
    proj_b: usize,
}

impl TfilmSlots {
    /// True when a second, reverse-time LSTM feeds the projection.
    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub role: Role,
    pub in_channels: usize,
    pub filters: usize,
    pub kernel_len: usize,
    pub geometry: ConvGeometry,
    pub dropout: f64,
    pub tfilm: Option<TfilmSlots>,
    conv_w: usize,
    conv_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

struct Builder<'a, R: rand::Rng> {
    cfg: &'a ModelConfig,
    rng: R,
    params: Vec<Tensor>,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t.with_name(name));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        prefix: &str,
        role: Role,
        in_c: usize,
        out_c: usize,
        k: usize,
        geometry: ConvGeometry,
        dropout: f64,
        with_tfilm: bool,
        zero: bool,
    ) -> Layer {
        let w = if zero {
            Tensor::zeros(vec![out_c, in_c, k]).expect("positive extents")
        } else {
            layers::conv_init(in_c, out_c, k, &mut self.rng)
        };
        let conv_w = self.push(format!("{prefix}.conv.weight"), w);
        let conv_b = self.push(format!("{prefix}.conv.bias"), Tensor::zeros(vec![out_c]).expect("positive"));
        let tfilm = with_tfilm.then(|| {
            let c = out_c;
            let cell = |b: &mut Self, dir: &str| {
                let LstmCell { w_ih, w_hh, bias } = LstmCell::init(c, c, &mut b.rng);
                [
                    b.push(format!("{prefix}.tfilm.{dir}.w_ih"), w_ih),
                    b.push(format!("{prefix}.tfilm.{dir}.w_hh"), w_hh),
                    b.push(format!("{prefix}.tfilm.{dir}.bias"), bias),
                ]
            };
            let forward = cell(self, "fwd");
            let backward = self.cfg.bidirectional.then(|| cell(self, "bwd"));
            let width = if self.cfg.bidirectional { 2 * c } else { c };
            let proj_w = self.push(
                format!("{prefix}.tfilm.proj.weight"),
                Tensor::zeros(vec![2 * c, width]).expect("positive"),
            );
            let proj_b = self.push(
                format!("{prefix}.tfilm.proj.bias"),
                Tensor::zeros(vec![2 * c]).expect("positive"),
            );
            TfilmSlots {
                channels: c,
                hidden: c,
                forward,
                backward,
                proj_w,
                proj_b,
            }
        });
        Layer {
            role,
            in_channels: in_c,
            filters: out_c,
            kernel_len: k,
            geometry,
            dropout,
            tfilm,
            conv_w,
            conv_b,
        }
    }
}

/// Builds the network with parameters drawn deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        rng: rng::stream(seed, "init", 0),
        params: Vec::new(),
    };
    let k = cfg.blocks;
    let mut layers_out = Vec::new();
    let mut channels = cfg.input_channels;
    let mut skips = Vec::new();
    let strided = |dilation| ConvGeometry::new(2, dilation, Padding::Same);

    for d in 1..=k {
        let f = cfg.down_filters(d);
        let l = b.layer(
            &format!("down{d}"),
            Role::Down(d),
            channels,
            f,
            ModelConfig::down_kernel(d),
            strided(cfg.dilation),
            cfg.block_dropout,
            cfg.use_tfilm,
            false,
        );
        layers_out.push(l);
        skips.push(f);
        channels = f;
    }
    if k > 0 {
        let f = cfg.bottleneck_filters();
        let l = b.layer(
            "bottleneck",
            Role::Bottleneck,
            channels,
            f,
            9,
            strided(1),
            cfg.dropout_rate,
            cfg.use_tfilm,
            false,
        );
        layers_out.push(l);
        channels = f;
    }
    for u in 1..=k {
        let f = cfg.up_filters(u);
        let l = b.layer(
            &format!("up{u}"),
            Role::Up(u),
            channels,
            f,
            cfg.up_kernel(u),
            ConvGeometry::default(),
            cfg.block_dropout,
            false,
            false,
        );
        layers_out.push(l);
        channels = f / 2;
        if cfg.use_skip_stacking {
            channels += skips[k - u];
        }
    }
    // With no encoder the final stage sees the full-rate input, so it strides
    // by 2 before the subpixel shuffle restores the length.
    let final_geometry = if k == 0 { strided(1) } else { ConvGeometry::default() };
    let l = b.layer("final", Role::Final, channels, 2, 9, final_geometry, 0.0, false, true);
    layers_out.push(l);

    Ok(Model {
        config: cfg.clone(),
        layers: layers_out,
        params: b.params,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn down_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| matches!(l.role, Role::Down(_)))
    }

    pub fn up_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| matches!(l.role, Role::Up(_)))
    }

    pub fn tfilm_count(&self) -> usize {
        self.layers.iter().filter(|l| l.tfilm.is_some()).count()
    }

    /// TFiLM block lengths, encoder order, for input length `t`.
    pub fn tfilm_block_lengths(&self, t: usize) -> Vec<usize> {
        if !self.config.use_tfilm {
            return Vec::new();
        }
        self.config
            .encoder_lengths(t)
            .into_iter()
            .map(|tl| tl / self.config.blocks_per_tfilm)
            .collect()
    }

    /// Same network with every parameter rounded to `f32`, the precision a
    /// checkpoint stores.
    pub fn rounded_to_f32(&self) -> Model {
        let mut m = self.clone();
        for p in &mut m.params {
            let name = p.name().map(str::to_owned);
            let t = p.map(|v| v as f32 as f64);
            *p = match name {
                Some(n) => t.with_name(n),
                None => t,
            };
        }
        m
    }

    /// Replaces the parameter values; shapes must agree.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(violation(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(violation(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    old.name().unwrap_or("?"),
                    old.shape(),
                    new.shape()
                )));
            }
        }
        for (old, new) in self.params.iter_mut().zip(values) {
            let name = old.name().map(str::to_owned);
            *old = match name {
                Some(n) => new.with_name(n),
                None => new,
            };
        }
        Ok(())
    }

    /// Pushes every parameter onto `tape` as a trainable leaf, in
    /// [`Model::params`] order.
    pub fn push_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn tfilm_vars(&self, slots: &TfilmSlots, vars: &[Var], block_len: usize) -> TfilmVars {
        let cell = |s: [usize; 3]| LstmCellVars {
            w_ih: vars[s[0]],
            w_hh: vars[s[1]],
            bias: vars[s[2]],
        };
        TfilmVars {
            block_len,
            forward: cell(slots.forward),
            backward: slots.backward.map(cell),
            proj_w: vars[slots.proj_w],
            proj_b: vars[slots.proj_b],
        }
    }

    /// Records the forward pass of `x: [N, T, k]` on `tape` using parameter
    /// handles from [`Model::push_params`]; returns `[N, T, 1]`.
    pub fn forward_var(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode, seed: u64) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [_, t, c] = shape[..] else {
            return Err(ModelError::LengthInvariantViolation {
                len: shape.iter().product(),
                reason: format!("expected [N, T, k] input, got {shape:?}"),
            });
        };
        if c != self.config.input_channels {
            return Err(ModelError::InputChannels {
                expected: self.config.input_channels,
                got: c,
            });
        }
        self.config.check_length(t)?;

        let mut h = x;
        let mut skips = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layers::conv1d_var(tape, h, vars[layer.conv_w], vars[layer.conv_b], layer.geometry)?;
            if layer.role == Role::Final {
                h = layers::subpixel_shuffle_var(tape, h, 2)?;
                if self.config.use_additive_residual {
                    let x0 = if c == 1 { x } else { tape.slice(x, 2, 0..1).map_err(LayerError::from)? };
                    h = tape.add(h, x0).map_err(LayerError::from)?;
                }
                break;
            }
            let drop_seed = rng::derive_seed(seed, "dropout", i as u64);
            h = layers::dropout_var(tape, h, layer.dropout, drop_seed, mode)?;
            h = tape.relu(h);
            if let Some(slots) = &layer.tfilm {
                let tl = tape.shape(h)[1];
                let tv = self.tfilm_vars(slots, vars, tl / self.config.blocks_per_tfilm);
                h = tfilm::tfilm_var(tape, h, &tv)?;
            }
            match layer.role {
                Role::Down(_) => skips.push(h),
                Role::Up(_) => {
                    h = layers::subpixel_shuffle_var(tape, h, 2)?;
                    if self.config.use_skip_stacking {
                        let skip = skips.pop().expect("one skip per down block");
                        h = tape.concat(&[h, skip], 2).map_err(LayerError::from)?;
                    }
                }
                _ => {}
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.push_params(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward_var(&mut tape, &vars, xv, mode, seed)?;
        Ok(tape.value(y).clone())
    }
}

/// Smallest-error `channelCap` for `variant` whose parameter count is within
/// `tolerance` (relative) of `target`'s.
pub fn match_param_count(target: &ModelConfig, variant: &ModelConfig, tolerance: f64) -> Result<ModelConfig> {
    let goal = build_model(target, 0)?.count_params() as f64;
    let mut best: Option<(f64, ModelConfig)> = None;
    for cap in (2..=2048).step_by(2) {
        let cfg = ModelConfig {
            channel_cap: cap,
            ..variant.clone()
        };
        let n = build_model(&cfg, 0)?.count_params() as f64;
        let err = (n - goal).abs() / goal;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, cfg));
        }
        if n > goal * (1.0 + tolerance) {
            break;
        }
    }
    match best {
        Some((err, cfg)) if err <= tolerance => Ok(cfg),
        Some((err, _)) => Err(violation(format!(
            "no channelCap matches {goal} parameters within {tolerance} (best relative error {err:.3})"
        ))),
        None => unreachable!("search range is non-empty"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny(k: usize, t: usize, cap: usize) -> ModelConfig {
        ModelConfig {
            blocks: k,
            patch_length: t,
            channel_cap: cap,
            blocks_per_tfilm: 4,
            ..Default::default()
        }
    }

    fn signal(n: usize, t: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rand_xoshiro::SplitMix64::seed_from_u64(seed);
        Tensor::from_fn(vec![n, t, c], |_| r.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn reference_filter_schedule() {
        let cfg = ModelConfig::default();
        let m = build_model(&ModelConfig { patch_length: 8192, ..cfg.clone() }, 0).unwrap();
        let down: Vec<_> = m.down_layers().map(|l| (l.filters, l.kernel_len)).collect();
        assert_eq!(down, [(128, 65), (256, 33), (512, 17), (512, 9)]);
        let up: Vec<_> = m.up_layers().map(|l| (l.filters, l.kernel_len)).collect();
        assert_eq!(up, [(512, 9), (512, 17), (512, 33), (256, 65)]);
        assert!(m.down_layers().all(|l| l.geometry.stride == 2 && l.geometry.dilation == 2));
        assert_eq!(cfg.encoder_lengths(8192), [4096, 2048, 1024, 512, 256]);
        assert_eq!(m.tfilm_block_lengths(8192), [128, 64, 32, 16, 8]);
    }

    #[test]
    fn identity_at_init() {
        let cfg = tiny(2, 64, 8);
        let m = build_model(&cfg, 3).unwrap();
        let x = signal(2, 64, 1, 1);
        assert_eq!(m.forward(&x, Mode::Eval, 0).unwrap(), x);
        assert_eq!(m.forward(&x, Mode::Train, 0).unwrap(), x);
        let m = build_model(&ModelConfig { use_additive_residual: false, ..cfg }, 3).unwrap();
        assert!(m.forward(&x, Mode::Eval, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract_and_multichannel_residual() {
        let cfg = ModelConfig {
            input_channels: 2,
            ..tiny(2, 256, 8)
        };
        let m = build_model(&cfg, 0).unwrap();
        let x = signal(1, 256, 2, 2);
        let y = m.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(y.shape(), &[1, 256, 1]);
        assert_eq!(y, x.slice(2, 0..1).unwrap());
        assert!(matches!(
            m.forward(&signal(1, 100, 2, 0), Mode::Eval, 0),
            Err(ModelError::LengthInvariantViolation { len: 100, .. })
        ));
    }

    #[test]
    fn zero_blocks_is_final_stage_only() {
        let m = build_model(&tiny(0, 16, 8), 0).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.count_params(), 2 * 9 + 2);
        let x = signal(1, 16, 1, 0);
        assert_eq!(m.forward(&x, Mode::Eval, 0).unwrap(), x);
    }

    fn lstm_params(c: usize, bidir: bool) -> usize {
        let cell = 4 * c * (c + c) + 4 * c;
        let width = if bidir { 2 * c } else { c };
        cell * if bidir { 2 } else { 1 } + 2 * c * width + 2 * c
    }

    /// Parameter count from the layer formulas alone.
    fn count_oracle(cfg: &ModelConfig) -> usize {
        let k = cfg.blocks;
        let cap = |f: usize| f.min(512).min(cfg.channel_cap);
        let conv = |i: usize, o: usize, len: usize| i * o * len + o;
        let tf = |c: usize| if cfg.use_tfilm { lstm_params(c, cfg.bidirectional) } else { 0 };
        let mut total = 0;
        let mut ch = cfg.input_channels;
        let mut skips = vec![];
        for d in 1..=k {
            let f = cap(1 << (6 + d));
            let len = ((1usize << (7 - d.min(7))) + 1).max(9);
            total += conv(ch, f, len) + tf(f);
            skips.push(f);
            ch = f;
        }
        if k > 0 {
            let f = cap(512);
            total += conv(ch, f, 9) + tf(f);
            ch = f;
        }
        for u in 1..=k {
            let m = k - u + 1;
            let f = cap(1 << (7 + m));
            let len = ((1usize << (7 - m.min(7))) + 1).max(9);
            total += conv(ch, f, len);
            ch = f / 2 + if cfg.use_skip_stacking { skips[m - 1] } else { 0 };
        }
        total + conv(ch, 2, 9)
    }

    #[test]
    fn param_count_matches_formula() {
        let reference = build_model(&ModelConfig::default(), 0).unwrap();
        assert_eq!(reference.count_params(), count_oracle(&ModelConfig::default()));
        for cfg in [
            tiny(2, 64, 8),
            ModelConfig { bidirectional: true, ..tiny(3, 256, 16) },
            ModelConfig { use_tfilm: false, ..tiny(2, 64, 8) },
            ModelConfig { use_skip_stacking: false, ..tiny(2, 64, 8) },
        ] {
            assert_eq!(build_model(&cfg, 0).unwrap().count_params(), count_oracle(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn doubling_channels_quadruples_interior_weights() {
        let a = build_model(&tiny(2, 64, 8), 0).unwrap();
        let b = build_model(&tiny(2, 64, 16), 0).unwrap();
        // down2 maps cap → cap channels in both.
        let w = |m: &Model| m.params().iter().find(|p| p.name() == Some("down2.conv.weight")).unwrap().len();
        assert_eq!(w(&b), 4 * w(&a));
    }

    #[test]
    fn toggles_change_graph() {
        let base = build_model(&tiny(2, 64, 8), 0).unwrap();
        let no_tfilm = build_model(&ModelConfig { use_tfilm: false, ..tiny(2, 64, 8) }, 0).unwrap();
        assert_eq!(base.tfilm_count(), 3);
        assert_eq!(no_tfilm.tfilm_count(), 0);
        assert!(no_tfilm.count_params() < base.count_params());
        let no_skip = build_model(&ModelConfig { use_skip_stacking: false, ..tiny(2, 64, 8) }, 0).unwrap();
        assert!(no_skip.up_layers().nth(1).unwrap().in_channels < base.up_layers().nth(1).unwrap().in_channels);
    }

    #[test]
    fn config_violations_named() {
        let err = build_model(&tiny(2, 100, 8), 0).unwrap_err();
        assert!(err.to_string().contains("2^(K+1)"), "{err}");
        let err = build_model(&ModelConfig { blocks_per_tfilm: 3, ..tiny(2, 64, 8) }, 0).unwrap_err();
        assert!(err.to_string().contains("blocks"), "{err}");
        assert!(build_model(&ModelConfig { channel_cap: 7, ..tiny(2, 64, 8) }, 0).is_err());
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = build_model(&tiny(2, 64, 8), 9).unwrap();
        let b = build_model(&tiny(2, 64, 8), 9).unwrap();
        let c = build_model(&tiny(2, 64, 8), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_matching() {
        let full = tiny(2, 64, 32);
        let conv = match_param_count(&full, &ModelConfig { use_tfilm: false, ..full.clone() }, 0.1).unwrap();
        let n_full = build_model(&full, 0).unwrap().count_params() as f64;
        let n_conv = build_model(&conv, 0).unwrap().count_params() as f64;
        assert!((n_conv - n_full).abs() / n_full <= 0.1);
        assert!(conv.channel_cap > 32);
    }

    #[test]
    fn gradcheck_miniature() {
        let report = crate::gradcheck::model_case(&crate::gradcheck::miniature_config(false), 4).unwrap();
        assert!(report.passed, "{report:#?}");
    }
}
