//! Signals, synthetic generators, training pairs and patches, the imputation
//! mask, and signal file formats.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, DspError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("not a signal file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported signal file version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedWavEncoding(String),
    #[error("rate must be in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("patch length {patch} exceeds signal length {len}")]
    PatchTooLong { patch: usize, len: usize },
    #[error("signal length {len} is not divisible by ratio {ratio}")]
    LengthNotDivisible { len: usize, ratio: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(hound::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a signal came from, kept alongside it on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_file: Option<String>,
    /// Processing steps applied, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<serde_json::Value>,
}

impl Provenance {
    fn with_step(&self, step: serde_json::Value) -> Self {
        let mut p = self.clone();
        p.steps.push(step);
        p
    }
}

/// `k`-channel signal of `T` samples, stored `[T, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalAsset {
    /// Hz; 0 for abstract series.
    pub sample_rate: u32,
    samples: Tensor,
    pub provenance: Provenance,
}

impl SignalAsset {
    pub fn new(sample_rate: u32, samples: Tensor, provenance: Provenance) -> Result<Self> {
        if samples.rank() != 2 {
            return Err(DataError::InvalidSignal(format!(
                "samples must be [T, k], got shape {:?}",
                samples.shape()
            )));
        }
        if let Some(i) = samples.data().iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidSignal(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self {
            sample_rate,
            samples,
            provenance,
        })
    }

    pub fn from_channels(sample_rate: u32, channels: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let k = channels.len();
        let t = channels.first().map_or(0, Vec::len);
        if k == 0 || t == 0 {
            return Err(DataError::InvalidSignal("signal needs at least one sample and channel".into()));
        }
        if channels.iter().any(|c| c.len() != t) {
            return Err(DataError::InvalidSignal("channels differ in length".into()));
        }
        let data = (0..t).flat_map(|i| channels.iter().map(move |c| c[i])).collect();
        Self::new(sample_rate, Tensor::new(vec![t, k], data)?, provenance)
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>, provenance: Provenance) -> Result<Self> {
        Self::from_channels(sample_rate, &[samples], provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        let k = self.channels();
        self.samples.data().iter().skip(c).step_by(k).copied().collect()
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>, step: serde_json::Value) -> Result<Self> {
        let chans = (0..self.channels())
            .map(|c| f(&self.channel(c)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_channels(self.sample_rate, &chans, self.provenance.with_step(step))
    }
}

// ---------------------------------------------------------------------------
// Synthetic signals

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SineComponent {
    /// Hz.
    pub freq: f64,
    pub amp: f64,
    /// Radians; drawn uniformly from the seed when absent.
    #[serde(default)]
    pub phase: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase", deny_unknown_fields)]
pub enum SynthSpec {
    Multisine {
        length: usize,
        sample_rate: u32,
        components: Vec<SineComponent>,
    },
    /// Linear frequency sweep.
    Chirp {
        length: usize,
        sample_rate: u32,
        start_hz: f64,
        end_hz: f64,
        amp: f64,
    },
    NoisyMultisine {
        length: usize,
        sample_rate: u32,
        components: Vec<SineComponent>,
        noise_std: f64,
    },
    /// `start + Σ steps + seasonal + noise`: a Gaussian random walk with a
    /// periodic component and observation noise.
    RandomWalk {
        length: usize,
        start: f64,
        step_std: f64,
        #[serde(default)]
        season_period: usize,
        #[serde(default)]
        season_amp: f64,
        #[serde(default)]
        noise_std: f64,
    },
}

impl SynthSpec {
    pub fn length(&self) -> usize {
        match self {
            SynthSpec::Multisine { length, .. }
            | SynthSpec::Chirp { length, .. }
            | SynthSpec::NoisyMultisine { length, .. }
            | SynthSpec::RandomWalk { length, .. } => *length,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.length() == 0 {
            return bad("length must be at least 1".into());
        }
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(DataError::InvalidSpec(format!("{name} must be finite, got {v}")))
            }
        };
        match self {
            SynthSpec::Multisine {
                sample_rate, components, ..
            }
            | SynthSpec::NoisyMultisine {
                sample_rate, components, ..
            } => {
                if *sample_rate == 0 {
                    return bad("sampleRate must be positive".into());
                }
                for c in components {
                    finite("freq", c.freq)?;
                    finite("amp", c.amp)?;
                    if let Some(p) = c.phase {
                        finite("phase", p)?;
                    }
                }
                if let SynthSpec::NoisyMultisine { noise_std, .. } = self {
                    if !(*noise_std >= 0.0) || !noise_std.is_finite() {
                        return bad(format!("noiseStd must be non-negative, got {noise_std}"));
                    }
                }
            }
            SynthSpec::Chirp {
                sample_rate,
                start_hz,
                end_hz,
                amp,
                ..
            } => {
                if *sample_rate == 0 {
                    return bad("sampleRate must be positive".into());
                }
                finite("startHz", *start_hz)?;
                finite("endHz", *end_hz)?;
                finite("amp", *amp)?;
            }
            SynthSpec::RandomWalk {
                start,
                step_std,
                season_amp,
                noise_std,
                ..
            } => {
                finite("start", *start)?;
                finite("seasonAmp", *season_amp)?;
                for (name, v) in [("stepStd", *step_std), ("noiseStd", *noise_std)] {
                    if !(v >= 0.0) || !v.is_finite() {
                        return bad(format!("{name} must be non-negative, got {v}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> u32 {
        match self {
            SynthSpec::Multisine { sample_rate, .. }
            | SynthSpec::Chirp { sample_rate, .. }
            | SynthSpec::NoisyMultisine { sample_rate, .. } => *sample_rate,
            SynthSpec::RandomWalk { .. } => 0,
        }
    }
}

fn multisine(length: usize, rate: u32, components: &[SineComponent], rng: &mut impl Rng) -> Vec<f64> {
    let phases: Vec<f64> = components
        .iter()
        .map(|c| c.phase.unwrap_or_else(|| rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..length)
        .map(|t| {
            let time = t as f64 / rate as f64;
            components
                .iter()
                .zip(&phases)
                .map(|(c, &p)| c.amp * (2.0 * PI * c.freq * time + p).sin())
                .sum()
        })
        .collect()
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated non-negative std")
}

/// Generates a mono signal; deterministic in `seed`.
pub fn synth_signal(spec: &SynthSpec, seed: u64) -> Result<SignalAsset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "synth", 0);
    let samples = match spec {
        SynthSpec::Multisine {
            length,
            sample_rate,
            components,
        } => multisine(*length, *sample_rate, components, &mut rng),
        SynthSpec::NoisyMultisine {
            length,
            sample_rate,
            components,
            noise_std,
        } => {
            let clean = multisine(*length, *sample_rate, components, &mut rng);
            let n = normal(*noise_std);
            clean.into_iter().map(|v| v + n.sample(&mut rng)).collect()
        }
        SynthSpec::Chirp {
            length,
            sample_rate,
            start_hz,
            end_hz,
            amp,
        } => {
            let duration = *length as f64 / *sample_rate as f64;
            let sweep = (end_hz - start_hz) / duration;
            (0..*length)
                .map(|t| {
                    let time = t as f64 / *sample_rate as f64;
                    amp * (2.0 * PI * (start_hz * time + 0.5 * sweep * time * time)).sin()
                })
                .collect()
        }
        SynthSpec::RandomWalk {
            length,
            start,
            step_std,
            season_period,
            season_amp,
            noise_std,
        } => {
            let steps = normal(*step_std);
            let noise = normal(*noise_std);
            let season_phase = rng.random_range(0.0..2.0 * PI);
            let mut level = *start;
            (0..*length)
                .map(|t| {
                    level += steps.sample(&mut rng);
                    let season = if *season_period > 0 {
                        season_amp * (2.0 * PI * t as f64 / *season_period as f64 + season_phase).sin()
                    } else {
                        0.0
                    };
                    level + season + noise.sample(&mut rng)
                })
                .collect()
        }
    };
    SignalAsset::mono(
        spec.sample_rate(),
        samples,
        Provenance {
            generator: Some(spec.clone()),
            seed: Some(seed),
            ..Provenance::default()
        },
    )
}

/// A corpus of harmonic multisines. Each signal has a random fundamental in
/// `[f0_min, f0_max]` Hz and up to `harmonics` partials below 0.95 of Nyquist,
/// with amplitudes `k^(−ρ)` for a per-signal tilt `ρ` drawn from
/// `[rolloff_min, rolloff_max]`, each scaled by a factor drawn from
/// `[1 − jitter, 1]`. Phase-locked partials have phase `k·φ` for one random
/// `φ` per signal; otherwise every partial gets its own random phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct HarmonicCorpus {
    pub count: usize,
    pub length: usize,
    pub sample_rate: u32,
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics: usize,
    pub rolloff_min: f64,
    pub rolloff_max: f64,
    pub jitter: f64,
    pub phase_locked: bool,
}

impl Default for HarmonicCorpus {
    fn default() -> Self {
        Self {
            count: 64,
            length: 8192,
            sample_rate: 16_000,
            f0_min: 100.0,
            f0_max: 400.0,
            harmonics: 12,
            rolloff_min: 1.0,
            rolloff_max: 1.0,
            jitter: 0.8,
            phase_locked: false,
        }
    }
}

impl HarmonicCorpus {
    pub fn specs(&self, seed: u64) -> Result<Vec<SynthSpec>> {
        if self.f0_min <= 0.0
            || self.f0_max < self.f0_min
            || self.harmonics == 0
            || self.rolloff_max < self.rolloff_min
            || !(0.0..=1.0).contains(&self.jitter)
        {
            return Err(DataError::InvalidSpec(format!(
                "need 0 < f0Min <= f0Max, harmonics >= 1, rolloffMin <= rolloffMax, jitter in [0, 1]; got {self:?}"
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        Ok((0..self.count)
            .map(|i| {
                let mut r = rng::stream(seed, "corpus", i as u64);
                let f0 = r.random_range(self.f0_min..=self.f0_max);
                let tilt = r.random_range(self.rolloff_min..=self.rolloff_max);
                let base_phase = r.random_range(0.0..2.0 * PI);
                let components = (1..=self.harmonics)
                    .map(|k| (k, f0 * k as f64))
                    .filter(|&(_, f)| f < 0.95 * nyquist)
                    .map(|(k, freq)| {
                        let scale = r.random_range(1.0 - self.jitter..=1.0);
                        let own_phase = r.random_range(0.0..2.0 * PI);
                        SineComponent {
                            freq,
                            amp: scale / (k as f64).powf(tilt),
                            phase: Some(if self.phase_locked {
                                (k as f64 * base_phase) % (2.0 * PI)
                            } else {
                                own_phase
                            }),
                        }
                    })
                    .collect();
                SynthSpec::Multisine {
                    length: self.length,
                    sample_rate: self.sample_rate,
                    components,
                }
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Pairs, patches, masks

/// Low-resolution input aligned with `y`: `spline_upsample(degrade(y, r), r)`
/// per channel.
pub fn make_pairs(y: &SignalAsset, r: usize) -> Result<(SignalAsset, SignalAsset)> {
    if r == 0 || y.len() % r != 0 {
        return Err(DataError::LengthNotDivisible { len: y.len(), ratio: r });
    }
    let step = serde_json::json!({
        "op": "degrade+splineUpsample",
        "ratio": r,
        "filter": {"type": "cheby1", "order": dsp::DEGRADE_ORDER, "rippleDb": dsp::DEGRADE_RIPPLE_DB, "cutoff": 0.8 / r as f64, "zeroPhase": true},
    });
    let x = y.map_channels(|c| Ok(dsp::spline_upsample(&dsp::degrade(c, r)?, r)?), step)?;
    Ok((x, y.clone()))
}

/// One aligned training window.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `[P, k]`.
    pub source: Tensor,
    /// `[P, 1]`.
    pub target: Tensor,
    pub signal: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub pairs: Vec<PatchPair>,
    pub patch_length: usize,
    pub stride: usize,
    pub shuffle_seed: u64,
}

/// Windows at offsets `0, stride, 2·stride, …`; the target is channel 0 of `y`.
pub fn make_patches(
    x: &SignalAsset,
    y: &SignalAsset,
    signal: usize,
    patch_length: usize,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    if x.len() != y.len() {
        return Err(DataError::Mismatch(format!(
            "source has {} samples, target {}",
            x.len(),
            y.len()
        )));
    }
    if patch_length == 0 || stride == 0 {
        return Err(DataError::InvalidSpec("patch length and stride must be positive".into()));
    }
    if patch_length > x.len() {
        return Err(DataError::PatchTooLong {
            patch: patch_length,
            len: x.len(),
        });
    }
    let target = y.samples().slice(1, 0..1)?;
    let count = (x.len() - patch_length) / stride + 1;
    (0..count)
        .map(|i| {
            let off = i * stride;
            Ok(PatchPair {
                source: x.samples().slice(0, off..off + patch_length)?,
                target: target.slice(0, off..off + patch_length)?,
                signal,
                offset: off,
            })
        })
        .collect()
}

impl PatchDataset {
    /// Patches from many aligned `(x, y)` signal pairs.
    pub fn from_signals(
        signals: &[(SignalAsset, SignalAsset)],
        patch_length: usize,
        stride: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, (x, y)) in signals.iter().enumerate() {
            pairs.extend(make_patches(x, y, i, patch_length, stride)?);
        }
        Ok(Self {
            pairs,
            patch_length,
            stride,
            shuffle_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Masked copy and sorted masked positions; each sample is zeroed
/// independently with probability `rate`.
pub fn zero_mask(x: &[f64], rate: f64, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::InvalidRate(rate));
    }
    let mut r = rng::stream(seed, "mask", 0);
    let mut out = x.to_vec();
    let mut mask = Vec::new();
    for (i, v) in out.iter_mut().enumerate() {
        if r.random::<f64>() < rate {
            *v = 0.0;
            mask.push(i);
        }
    }
    Ok((out, mask))
}

// ---------------------------------------------------------------------------
// Files

const RAW_MAGIC: &[u8; 4] = b"TFS1";
const RAW_VERSION: u16 = 1;
const RAW_HEADER: usize = 4 + 2 + 2 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFormat {
    RawF32,
    Wav,
    Csv,
}

impl SignalFormat {
    /// `.wav` and `.csv` by extension; anything else is RAWF32.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("wav") => SignalFormat::Wav,
            Some("csv") => SignalFormat::Csv,
            _ => SignalFormat::RawF32,
        }
    }
}

/// Sidecar metadata written next to every signal file as `<path>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Sidecar {
    sample_rate: u32,
    provenance: Provenance,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_signal(path: &Path, asset: &SignalAsset) -> Result<()> {
    match SignalFormat::from_path(path) {
        SignalFormat::RawF32 => write_rawf32(path, asset)?,
        SignalFormat::Wav => write_wav(path, asset)?,
        SignalFormat::Csv => write_csv(path, asset)?,
    }
    let side = sidecar_path(path);
    let meta = Sidecar {
        sample_rate: asset.sample_rate,
        provenance: asset.provenance.clone(),
    };
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&side))
}

/// Reads a signal; provenance comes from the sidecar when present.
pub fn read_signal(path: &Path) -> Result<SignalAsset> {
    let mut asset = match SignalFormat::from_path(path) {
        SignalFormat::RawF32 => read_rawf32(path)?,
        SignalFormat::Wav => read_wav(path)?,
        SignalFormat::Csv => read_csv(path)?,
    };
    let side = sidecar_path(path);
    if side.exists() {
        let meta: Sidecar = serde_json::from_slice(&fs::read(&side).map_err(io_err(&side))?)?;
        if asset.sample_rate == 0 {
            asset.sample_rate = meta.sample_rate;
        }
        asset.provenance = meta.provenance;
    }
    if asset.provenance.source_file.is_none() {
        asset.provenance.source_file = Some(path.display().to_string());
    }
    Ok(asset)
}

/// `TFS1`, u16 version, u16 channels, u32 sample rate, u64 frames, then
/// `frames × channels` little-endian f32 values, interleaved by channel.
pub fn write_rawf32(path: &Path, asset: &SignalAsset) -> Result<()> {
    let channels = u16::try_from(asset.channels())
        .map_err(|_| DataError::InvalidSignal(format!("{} channels exceed u16", asset.channels())))?;
    let mut buf = Vec::with_capacity(RAW_HEADER + 4 * asset.samples().len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
    buf.extend_from_slice(&channels.to_le_bytes());
    buf.extend_from_slice(&asset.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(asset.len() as u64).to_le_bytes());
    for &v in asset.samples().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_rawf32(path: &Path) -> Result<SignalAsset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_rawf32(&bytes)
}

fn parse_rawf32(bytes: &[u8]) -> Result<SignalAsset> {
    let truncated = |expected: u64| DataError::TruncatedFile {
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(RAW_HEADER as u64));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < RAW_HEADER {
        return Err(truncated(RAW_HEADER as u64));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != RAW_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let channels = u16_at(6) as usize;
    let rate = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let frames = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = (RAW_HEADER as u64).saturating_add(frames.saturating_mul(channels as u64).saturating_mul(4));
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if channels == 0 || frames == 0 {
        return Err(DataError::InvalidSignal("file holds no samples".into()));
    }
    let data: Vec<f64> = bytes[RAW_HEADER..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    SignalAsset::new(
        rate,
        Tensor::new(vec![frames as usize, channels], data)?,
        Provenance::default(),
    )
}

/// 16-bit PCM; samples are clamped to `[−1, 32767/32768]` and scaled by 32768.
pub fn write_wav(path: &Path, asset: &SignalAsset) -> Result<()> {
    if asset.channels() > 2 {
        return Err(DataError::UnsupportedWavEncoding(format!(
            "{} channels (mono or stereo only)",
            asset.channels()
        )));
    }
    let spec = hound::WavSpec {
        channels: asset.channels() as u16,
        sample_rate: asset.sample_rate.max(1),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = hound::WavWriter::new(BufWriter::new(file), spec).map_err(DataError::Wav)?;
    for &v in asset.samples().data() {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(DataError::Wav)?;
    }
    w.finalize().map_err(DataError::Wav)
}

pub fn read_wav(path: &Path) -> Result<SignalAsset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = match hound::WavReader::new(BufReader::new(file)) {
        Ok(r) => r,
        Err(hound::Error::Unsupported) => {
            return Err(DataError::UnsupportedWavEncoding("unsupported WAV format".into()))
        }
        Err(hound::Error::IoError(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(DataError::TruncatedFile {
                expected: 44,
                found: fs::metadata(path).map(|m| m.len()).unwrap_or(0),
            })
        }
        Err(e) => return Err(DataError::Wav(e)),
    };
    let spec = r.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 || spec.channels > 2 {
        return Err(DataError::UnsupportedWavEncoding(format!(
            "{:?} {}-bit, {} channels (need 16-bit PCM, mono or stereo)",
            spec.sample_format, spec.bits_per_sample, spec.channels
        )));
    }
    let expected_samples = r.len() as usize;
    let data: Vec<f64> = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| match e {
            hound::Error::IoError(_) => DataError::TruncatedFile {
                expected: 44 + 2 * expected_samples as u64,
                found: fs::metadata(path).map(|m| m.len()).unwrap_or(0),
            },
            other => DataError::Wav(other),
        })?;
    let k = spec.channels as usize;
    if data.len() != expected_samples || data.is_empty() {
        return Err(DataError::TruncatedFile {
            expected: 44 + 2 * expected_samples as u64,
            found: fs::metadata(path).map(|m| m.len()).unwrap_or(0),
        });
    }
    SignalAsset::new(
        spec.sample_rate,
        Tensor::new(vec![data.len() / k, k], data)?,
        Provenance::default(),
    )
}

/// Header row `ch0,ch1,…`, one row per time step.
pub fn write_csv(path: &Path, asset: &SignalAsset) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record((0..asset.channels()).map(|c| format!("ch{c}")))?;
    for row in asset.samples().data().chunks_exact(asset.channels()) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<SignalAsset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let k = r.headers()?.len();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::InvalidSignal(format!("not a number: {field:?}")))?;
            data.push(v);
        }
    }
    if k == 0 || data.is_empty() {
        return Err(DataError::InvalidSignal("CSV holds no samples".into()));
    }
    SignalAsset::new(0, Tensor::new(vec![data.len() / k, k], data)?, Provenance::default())
}

/// Writes JSON to `path`, creating parent directories.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64) -> SynthSpec {
        SynthSpec::Multisine {
            length: 1000,
            sample_rate: 8000,
            components: vec![SineComponent { freq, amp, phase: None }],
        }
    }

    #[test]
    fn multisine_basics() {
        let zero = synth_signal(&sine(440.0, 0.0), 1).unwrap();
        assert!(zero.samples().data().iter().all(|&v| v == 0.0));
        let s = synth_signal(&sine(440.0, 0.7), 1).unwrap();
        assert!(s.samples().max_abs() <= 0.7);
        assert_eq!(s, synth_signal(&sine(440.0, 0.7), 1).unwrap());
        assert_ne!(s.samples(), synth_signal(&sine(440.0, 0.7), 2).unwrap().samples());
        assert_eq!(s.provenance.seed, Some(1));
    }

    #[test]
    fn other_generators_are_deterministic() {
        let specs = [
            SynthSpec::Chirp {
                length: 500,
                sample_rate: 8000,
                start_hz: 100.0,
                end_hz: 2000.0,
                amp: 0.5,
            },
            SynthSpec::NoisyMultisine {
                length: 500,
                sample_rate: 8000,
                components: vec![SineComponent {
                    freq: 300.0,
                    amp: 1.0,
                    phase: Some(0.0),
                }],
                noise_std: 0.1,
            },
            SynthSpec::RandomWalk {
                length: 500,
                start: 10.0,
                step_std: 0.2,
                season_period: 7,
                season_amp: 1.0,
                noise_std: 0.3,
            },
        ];
        for spec in &specs {
            let a = synth_signal(spec, 3).unwrap();
            assert_eq!(a.len(), 500);
            assert_eq!(a, synth_signal(spec, 3).unwrap());
        }
        let chirp = synth_signal(&specs[0], 0).unwrap();
        assert!(chirp.samples().max_abs() <= 0.5);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SynthSpec::Multisine {
            length: 0,
            sample_rate: 8000,
            components: vec![],
        };
        assert!(matches!(synth_signal(&bad, 0), Err(DataError::InvalidSpec(_))));
        let bad = SynthSpec::RandomWalk {
            length: 10,
            start: 0.0,
            step_std: -1.0,
            season_period: 0,
            season_amp: 0.0,
            noise_std: 0.0,
        };
        assert!(matches!(synth_signal(&bad, 0), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{"kind":"multisine","length":16,"sampleRate":100,"components":[{"freq":5,"amp":1}]}"#;
        let spec: SynthSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.length(), 16);
        let back = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&back).unwrap(), spec);
    }

    #[test]
    fn harmonic_corpus_is_band_limited() {
        let corpus = HarmonicCorpus {
            count: 5,
            ..HarmonicCorpus::default()
        };
        let specs = corpus.specs(7).unwrap();
        assert_eq!(specs.len(), 5);
        assert_eq!(specs, corpus.specs(7).unwrap());
        for s in &specs {
            let SynthSpec::Multisine { components, .. } = s else { panic!() };
            assert!(components.iter().all(|c| c.freq < 0.95 * 8000.0));
        }
        let locked = HarmonicCorpus {
            count: 2,
            jitter: 0.0,
            phase_locked: true,
            ..HarmonicCorpus::default()
        };
        for s in locked.specs(1).unwrap() {
            let SynthSpec::Multisine { components, .. } = s else { panic!() };
            let phi = components[0].phase.unwrap();
            for (k, c) in components.iter().enumerate() {
                let k = (k + 1) as f64;
                assert!((c.phase.unwrap() - (k * phi) % (2.0 * PI)).abs() < 1e-12);
                assert_eq!(c.amp, 1.0 / k);
            }
        }
    }

    #[test]
    fn pairs_preserve_shape_and_alignment() {
        let y = synth_signal(
            &SynthSpec::Multisine {
                length: 8192,
                sample_rate: 16000,
                components: vec![
                    SineComponent { freq: 310.0, amp: 1.0, phase: None },
                    SineComponent { freq: 1234.0, amp: 0.5, phase: None },
                ],
            },
            4,
        )
        .unwrap();
        let (x, y2) = make_pairs(&y, 1).unwrap();
        assert_eq!(x.samples(), y.samples());
        assert_eq!(y2, y);
        let (x, _) = make_pairs(&y, 4).unwrap();
        assert_eq!((x.len(), x.channels()), (8192, 1));
        // Cross-correlation oracle: the best lag is zero.
        let (a, b) = (x.channel(0), y.channel(0));
        let corr = |lag: isize| -> f64 {
            (200..8000).map(|t| a[t] * b[(t as isize + lag) as usize]).sum()
        };
        let best = (-20..=20).max_by(|&p, &q| corr(p).total_cmp(&corr(q))).unwrap();
        assert_eq!(best, 0);
        assert!(matches!(make_pairs(&y, 3), Err(DataError::LengthNotDivisible { .. })));
    }

    #[test]
    fn patch_counting() {
        let s = SignalAsset::mono(0, (0..10).map(f64::from).collect(), Provenance::default()).unwrap();
        let p = make_patches(&s, &s, 0, 4, 2).unwrap();
        assert_eq!(p.iter().map(|q| q.offset).collect::<Vec<_>>(), [0, 2, 4, 6]);
        assert_eq!(p[1].source.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(p[1].source, p[1].target);
        assert_eq!(make_patches(&s, &s, 0, 5, 5).unwrap().len(), 2);
        assert_eq!(make_patches(&s, &s, 0, 10, 3).unwrap().len(), 1);
        assert!(matches!(
            make_patches(&s, &s, 0, 11, 1),
            Err(DataError::PatchTooLong { patch: 11, len: 10 })
        ));
    }

    #[test]
    fn masking() {
        let x: Vec<f64> = (1..=1000).map(f64::from).collect();
        let (m, mask) = zero_mask(&x, 0.0, 1).unwrap();
        assert_eq!(m, x);
        assert!(mask.is_empty());
        let (m, mask) = zero_mask(&x, 1.0, 1).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(mask.len(), 1000);
        let (m, mask) = zero_mask(&x, 0.25, 9).unwrap();
        for (i, (a, b)) in m.iter().zip(&x).enumerate() {
            if mask.binary_search(&i).is_ok() {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let big = vec![1.0; 100_000];
        let (_, mask) = zero_mask(&big, 0.3, 5).unwrap();
        assert!((mask.len() as f64 / 1e5 - 0.3).abs() < 0.01);
        assert!(matches!(zero_mask(&x, 1.5, 0), Err(DataError::InvalidRate(_))));
    }

    fn stereo() -> SignalAsset {
        SignalAsset::from_channels(
            16000,
            &[vec![0.1, -0.5, 0.25, 0.999], vec![0.0, 1.0 / 3.0, -1.0, 0.5]],
            Provenance {
                seed: Some(42),
                ..Provenance::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn rawf32_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.f32");
        let s = stereo();
        write_signal(&path, &s).unwrap();
        let back = read_signal(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.provenance.seed, Some(42));
        for (a, b) in back.samples().data().iter().zip(s.samples().data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TFS1");
        assert_eq!(bytes.len(), 20 + 8 * 4);
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_rawf32(&path), Err(DataError::TruncatedFile { .. })));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_rawf32(&path), Err(DataError::TruncatedFile { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, bad).unwrap();
        assert!(matches!(read_rawf32(&path), Err(DataError::BadMagic)));
    }

    #[test]
    fn wav_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let s = stereo();
        write_signal(&path, &s).unwrap();
        let back = read_signal(&path).unwrap();
        assert_eq!(back.channels(), 2);
        for (a, b) in back.samples().data().iter().zip(s.samples().data()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        // Full-scale positive sample.
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let p2 = dir.path().join("full.wav");
        let mut w = hound::WavWriter::create(&p2, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let full = read_wav(&p2).unwrap();
        assert_eq!(full.samples().data(), &[32767.0 / 32768.0, -1.0]);

        let p3 = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
            ..spec
        };
        let mut w = hound::WavWriter::create(&p3, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p3), Err(DataError::UnsupportedWavEncoding(_))));

        let bytes = fs::read(&p2).unwrap();
        fs::write(&p2, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_wav(&p2), Err(DataError::TruncatedFile { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = stereo();
        write_signal(&path, &s).unwrap();
        let back = read_signal(&path).unwrap();
        assert_eq!(back.samples(), s.samples());
        assert_eq!(back.sample_rate, 16000);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ch0,ch1\n"));
    }
}
