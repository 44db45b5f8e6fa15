//! Signal processing: cubic-spline upscaling, Chebyshev type I low-pass
//! design, decimation, STFT, and the SNR / LSD metrics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("signal of length {len} is too short, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("cutoff must lie strictly between 0 and 1 (fraction of Nyquist), got {0}")]
    InvalidCutoff(f64),
    #[error("passband ripple must be positive, got {0} dB")]
    InvalidRipple(f64),
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("ratio must be at least 1, got {0}")]
    InvalidRatio(usize),
    #[error("signal of length {len} is shorter than one frame of {frame}")]
    SignalTooShort { len: usize, frame: usize },
    #[error("invalid STFT configuration: {0}")]
    InvalidStft(String),
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("spline knots must be strictly increasing")]
    UnorderedKnots,
}

pub type Result<T> = std::result::Result<T, DspError>;

// ---------------------------------------------------------------------------
// Splines

/// Natural cubic spline (zero second derivative at both ends) through
/// arbitrary strictly increasing knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(DspError::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        let n = xs.len();
        if n < 2 {
            return Err(DspError::TooShort { len: n, min: 2 });
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DspError::UnorderedKnots);
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let k = n - 2;
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        })
    }

    /// Evaluates the spline; outside the knot range the first or last cubic
    /// segment is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let seg = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let (x0, x1) = (self.xs[seg], self.xs[seg + 1]);
        let (y0, y1) = (self.ys[seg], self.ys[seg + 1]);
        let (m0, m1) = (self.m[seg], self.m[seg + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

/// Upsamples by an integer ratio `r`: a natural cubic spline through
/// `(i·r, x[i])` evaluated on `0..r·len`.
pub fn spline_upsample(x: &[f64], r: usize) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(DspError::InvalidRatio(r));
    }
    if r == 1 {
        return Ok(x.to_vec());
    }
    if x.len() < 2 {
        return Err(DspError::TooShort { len: x.len(), min: 2 });
    }
    let knots: Vec<f64> = (0..x.len()).map(|i| (i * r) as f64).collect();
    let s = CubicSpline::new(&knots, x)?;
    Ok((0..x.len() * r).map(|t| s.eval(t as f64)).collect())
}

// ---------------------------------------------------------------------------
// IIR filters

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDesign {
    pub order: usize,
    pub ripple_db: f64,
    /// Fraction of Nyquist.
    pub cutoff: f64,
}

/// Transfer function `B(z)/A(z)` with `a[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub design: Option<FilterDesign>,
    pub poles: Vec<Complex64>,
}

impl IirFilter {
    pub fn passthrough() -> Self {
        Self {
            b: vec![1.0],
            a: vec![1.0],
            design: None,
            poles: Vec::new(),
        }
    }

    /// `H(e^{jω})` at `w`, a fraction of Nyquist.
    pub fn response(&self, w: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -PI * w);
        let poly = |c: &[f64]| c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z_inv + v);
        poly(&self.b) / poly(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.poles.iter().all(|p| p.norm() < 1.0)
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c
}

/// Chebyshev type I low-pass: analog prototype with poles on an ellipse set
/// by `ε = sqrt(10^(ripple/10) − 1)`, cutoff pre-warped and mapped through the
/// bilinear transform.
pub fn cheby1_design(order: usize, ripple_db: f64, cutoff: f64) -> Result<IirFilter> {
    if order == 0 {
        return Err(DspError::InvalidOrder);
    }
    if !(ripple_db > 0.0) || !ripple_db.is_finite() {
        return Err(DspError::InvalidRipple(ripple_db));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(DspError::InvalidCutoff(cutoff));
    }
    let n = order as f64;
    let eps = (10f64.powf(ripple_db / 10.0) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n;
    let analog: Vec<Complex64> = (0..order)
        .map(|i| {
            let m = -(n - 1.0) + 2.0 * i as f64;
            -(Complex64::new(mu, PI * m / (2.0 * n))).sinh()
        })
        .collect();
    let mut gain = analog.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p).re;
    if order % 2 == 0 {
        gain /= (1.0 + eps * eps).sqrt();
    }

    // Sample rate 2 (frequencies as fractions of Nyquist); prewarp the cutoff.
    let fs2 = 4.0;
    let warped = fs2 * (PI * cutoff / 2.0).tan();
    let analog: Vec<Complex64> = analog.iter().map(|p| p * warped).collect();
    gain *= warped.powi(order as i32);

    let poles: Vec<Complex64> = analog.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let denom = analog.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * (fs2 - p));
    gain *= (Complex64::new(1.0, 0.0) / denom).re;
    let zeros = vec![Complex64::new(-1.0, 0.0); order];

    let b = poly_from_roots(&zeros).iter().map(|c| c.re * gain).collect();
    let a = poly_from_roots(&poles).iter().map(|c| c.re).collect();
    Ok(IirFilter {
        b,
        a,
        design: Some(FilterDesign {
            order,
            ripple_db,
            cutoff,
        }),
        poles,
    })
}

impl IirFilter {
    /// Coefficients padded to equal length and normalized so `a[0] = 1`.
    fn normalized(&self) -> (Vec<f64>, Vec<f64>) {
        let len = self.b.len().max(self.a.len());
        let a0 = self.a[0];
        let pad = |c: &[f64]| {
            let mut v: Vec<f64> = c.iter().map(|x| x / a0).collect();
            v.resize(len, 0.0);
            v
        };
        (pad(&self.b), pad(&self.a))
    }

    /// Initial state of [`iir_apply_with_state`] that holds the output at the
    /// steady-state step response, so filtering a constant `c` from state
    /// `c·zi` produces no transient.
    pub fn steady_state(&self) -> Vec<f64> {
        let (b, a) = self.normalized();
        let n = b.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        // (I − Cᵀ)·zi = b[1..] − a[1..]·b[0], C the companion matrix of a.
        let mut m = vec![vec![0.0; n + 1]; n];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
            row[0] += a[i + 1];
            if i + 1 < n {
                row[i + 1] -= 1.0;
            }
            row[n] = b[i + 1] - a[i + 1] * b[0];
        }
        solve_augmented(m)
    }
}

/// Gaussian elimination with partial pivoting on an `n × (n+1)` system.
fn solve_augmented(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        m.swap(col, pivot);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// Direct-form II transposed filtering from a zero initial state.
pub fn iir_apply(f: &IirFilter, x: &[f64]) -> Vec<f64> {
    let (b, _) = f.normalized();
    iir_apply_with_state(f, x, &vec![0.0; b.len() - 1])
}

/// Direct-form II transposed filtering from initial state `zi`
/// (`max(len(a), len(b)) − 1` delays).
pub fn iir_apply_with_state(f: &IirFilter, x: &[f64], zi: &[f64]) -> Vec<f64> {
    let (b, a) = f.normalized();
    let len = b.len();
    let mut z = zi.to_vec();
    z.push(0.0);
    assert_eq!(z.len(), len, "initial state length");
    x.iter()
        .map(|&xn| {
            let yn = b[0] * xn + z[0];
            for i in 1..len {
                z[i - 1] = b[i] * xn - a[i] * yn + z[i];
            }
            yn
        })
        .collect()
}

/// Zero-phase filtering: forward then time-reversed passes over the signal
/// extended by odd reflection of `3·max(len(a), len(b))` samples at each
/// end, each pass started from the steady state of its first sample.
pub fn filtfilt(f: &IirFilter, x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * f.a.len().max(f.b.len());
    if x.len() <= pad {
        return Err(DspError::TooShort {
            len: x.len(),
            min: pad + 1,
        });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let zi = f.steady_state();
    let scaled = |c: f64| zi.iter().map(|z| z * c).collect::<Vec<_>>();
    let fwd = iir_apply_with_state(f, &ext, &scaled(ext[0]));
    let rev: Vec<f64> = fwd.into_iter().rev().collect();
    let bwd = iir_apply_with_state(f, &rev, &scaled(rev[0]));
    Ok(bwd.into_iter().rev().skip(pad).take(n).collect())
}

pub const DEGRADE_ORDER: usize = 8;
pub const DEGRADE_RIPPLE_DB: f64 = 0.05;

/// Zero-phase low-pass at `0.8/r` of Nyquist, then every `r`-th sample from
/// index 0. Zero phase keeps the result time-aligned with the input.
pub fn degrade(x: &[f64], r: usize) -> Result<Vec<f64>> {
    match r {
        0 => Err(DspError::InvalidRatio(r)),
        1 => Ok(x.to_vec()),
        _ => {
            let f = cheby1_design(DEGRADE_ORDER, DEGRADE_RIPPLE_DB, 0.8 / r as f64)?;
            Ok(filtfilt(&f, x)?.into_iter().step_by(r).collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann, `0.5 − 0.5·cos(2πn/N)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::new(8192)
    }
}

impl StftConfig {
    /// Hann window, 50% overlap.
    pub fn new(frame_length: usize) -> Self {
        Self {
            frame_length,
            hop: (frame_length / 2).max(1),
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `frames × (frame_length/2 + 1)` one-sided bins.
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.config.frame_length / 2 + 1
    }
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let n = cfg.frame_length;
    if n == 0 || cfg.hop == 0 {
        return Err(DspError::InvalidStft(format!(
            "frame length {n} and hop {} must be positive",
            cfg.hop
        )));
    }
    if x.len() < n {
        return Err(DspError::SignalTooShort { len: x.len(), frame: n });
    }
    let count = (x.len() - n) / cfg.hop + 1;
    let window = cfg.window.coefficients(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let frames = (0..count)
        .map(|f| {
            let start = f * cfg.hop;
            let mut buf: Vec<Complex64> = x[start..start + n]
                .iter()
                .zip(&window)
                .map(|(&v, &w)| Complex64::new(v * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(n / 2 + 1);
            buf
        })
        .collect();
    Ok(Spectrogram { frames, config: *cfg })
}

/// `10·log10(‖y‖² / ‖x − y‖²)` for approximation `x` and reference `y`;
/// `+∞` when they are identical.
pub fn snr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DspError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let signal: f64 = y.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(DspError::ZeroReference);
    }
    let noise: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Added to `|S|²` before taking the log.
pub const SPECTRAL_EPSILON: f64 = 1e-10;

/// Log-spectral distance with natural-log power spectra
/// `X = ln(|S|² + 1e-10)`: mean over frames of the RMS over bins of `X − X̂`.
pub fn lsd(x: &[f64], y: &[f64], cfg: &StftConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DspError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let sx = stft(x, cfg)?;
    let sy = stft(y, cfg)?;
    let log_power = |c: &Complex64| (c.norm_sqr() + SPECTRAL_EPSILON).ln();
    let total: f64 = sx
        .frames
        .iter()
        .zip(&sy.frames)
        .map(|(fx, fy)| {
            let ms = fx
                .iter()
                .zip(fy)
                .map(|(a, b)| {
                    let d = log_power(a) - log_power(b);
                    d * d
                })
                .sum::<f64>()
                / fx.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / sx.frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SplitMix64::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn spline_reproduces_ramp() {
        let y = spline_upsample(&[0.0, 1.0, 2.0], 2).unwrap();
        let expected = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5];
        for (a, e) in y.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{y:?}");
        }
        assert_eq!(spline_upsample(&[3.0, 1.0, 4.0], 1).unwrap(), [3.0, 1.0, 4.0]);
        assert!(matches!(spline_upsample(&[1.0], 2), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn spline_interpolates_slow_sine() {
        let f = |t: f64| (2.0 * PI * t / 200.0).sin();
        let coarse: Vec<f64> = (0..100).map(|i| f(4.0 * i as f64)).collect();
        let fine = spline_upsample(&coarse, 4).unwrap();
        // Compare inside the knot range against the true sine.
        let err = (0..=396).map(|t| (fine[t] - f(t as f64)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn spline_matches_natural_conditions() {
        let xs = [0.0, 1.0, 2.5, 4.0, 4.5];
        let ys = [1.0, -1.0, 2.0, 0.5, 0.0];
        let s = CubicSpline::new(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert!((s.eval(*x) - y).abs() < 1e-12);
        }
        // Second derivative by finite differences vanishes at the ends; first
        // derivative is continuous at interior knots.
        let h = 1e-4;
        let d2 = |x: f64| (s.eval(x + h) - 2.0 * s.eval(x) + s.eval(x - h)) / (h * h);
        assert!(d2(0.0).abs() < 1e-3 && d2(4.5).abs() < 1e-3);
        for &k in &xs[1..4] {
            let left = (s.eval(k) - s.eval(k - h)) / h;
            let right = (s.eval(k + h) - s.eval(k)) / h;
            assert!((left - right).abs() < 1e-3);
        }
        assert_eq!(CubicSpline::new(&[0.0, 0.0], &[1.0, 2.0]), Err(DspError::UnorderedKnots));
    }

    // Frozen from scipy.signal.cheby1(8, 0.05, Wn), run once.
    const REF_B_04: [f64; 9] = [
        0.00069873707728414,
        0.00558989661827313,
        0.01956463816395597,
        0.03912927632791193,
        0.04891159540988991,
        0.03912927632791193,
        0.01956463816395597,
        0.00558989661827313,
        0.00069873707728414,
    ];
    const REF_A_04: [f64; 9] = [
        1.0,
        -3.159100504614808,
        5.967108107202708,
        -7.519348642687463,
        6.827184931315479,
        -4.482072321959029,
        2.070876731225458,
        -0.6163275358434664,
        0.09158859355707848,
    ];
    const REF_B_02: [f64; 9] = [
        4.0359292893478159e-06,
        3.2287434314782527e-05,
        1.1300602010173884e-04,
        2.2601204020347769e-04,
        2.8251505025434713e-04,
        2.2601204020347769e-04,
        1.1300602010173884e-04,
        3.2287434314782527e-05,
        4.0359292893478159e-06,
    ];
    const REF_A_02: [f64; 9] = [
        1.0,
        -6.097112958371417,
        16.934600476036056,
        -27.866038271992032,
        29.63045373349599,
        -20.809092318786664,
        9.414279089931338,
        -2.506737807064883,
        0.3006872193662449,
    ];

    #[test]
    fn cheby1_matches_reference() {
        for (wn, rb, ra) in [(0.4, REF_B_04, REF_A_04), (0.2, REF_B_02, REF_A_02)] {
            let f = cheby1_design(8, 0.05, wn).unwrap();
            for (a, e) in f.b.iter().zip(rb).chain(f.a.iter().zip(ra)) {
                assert!((a - e).abs() < 1e-6, "{wn}: {a} vs {e}");
            }
            assert_eq!(f.a[0], 1.0);
            assert!(f.is_stable());
        }
    }

    #[test]
    fn cheby1_dc_gain_and_ripple() {
        let f = cheby1_design(8, 0.05, 0.4).unwrap();
        let floor = 10f64.powf(-0.05 / 20.0);
        assert!((f.response(0.0).norm() - floor).abs() < 1e-9);
        for i in 0..1024 {
            let w = 0.4 * i as f64 / 1023.0;
            let g = f.response(w).norm();
            assert!(g <= 1.0 + 1e-9 && g >= floor - 1e-9, "w={w}: {g}");
        }
        assert!(f.response(0.8).norm() < 1e-3);
    }

    #[test]
    fn cheby1_rejects_bad_arguments() {
        assert_eq!(cheby1_design(8, 0.05, 1.0), Err(DspError::InvalidCutoff(1.0)));
        assert_eq!(cheby1_design(8, 0.05, 0.0), Err(DspError::InvalidCutoff(0.0)));
        assert_eq!(cheby1_design(8, 0.0, 0.5), Err(DspError::InvalidRipple(0.0)));
        assert_eq!(cheby1_design(0, 0.05, 0.5), Err(DspError::InvalidOrder));
    }

    #[test]
    fn iir_passthrough_impulse_and_dc() {
        let x = noise(50, 1);
        assert_eq!(iir_apply(&IirFilter::passthrough(), &x), x);

        let f = cheby1_design(8, 0.05, 0.4).unwrap();
        let mut impulse = vec![0.0; 2000];
        impulse[0] = 1.0;
        let h = iir_apply(&f, &impulse);
        let peak = h.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // Largest response after sample n decays geometrically; the tail is
        // negligible long after the peak.
        let tail = h[400..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(tail < 1e-8 * peak, "{tail}");

        let y = iir_apply(&f, &[1.0; 3000]);
        let dc = f.b.iter().sum::<f64>() / f.a.iter().sum::<f64>();
        assert!((y[2999] - dc).abs() < 1e-9);
    }

    fn probe_signal() -> Vec<f64> {
        (0..64)
            .map(|t| {
                let t = t as f64;
                (0.3 * t).sin() + 0.5 * (1.1 * t).cos() + 0.01 * t
            })
            .collect()
    }

    #[test]
    fn steady_state_and_filtfilt_match_reference() {
        // Frozen from scipy.signal.lfilter_zi / filtfilt / decimate, run once.
        let zi_ref = [
            0.9935613368756748,
            -2.1529960610857475,
            3.760296648702961,
            -3.7550207651814698,
            2.9840650341088955,
            -1.511409800512511,
            0.528015613259219,
            -0.09036414472602423,
        ];
        let f = cheby1_design(8, 0.05, 0.4).unwrap();
        for (a, e) in f.steady_state().iter().zip(zi_ref) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
        let y = filtfilt(&f, &probe_signal()).unwrap();
        let picks = [
            (0, 4.9921809183155408e-01),
            (1, 3.8857494507560197e-01),
            (2, 3.0267628030493748e-01),
            (10, 2.0029816140256501e-01),
            (31, -4.7008995305835232e-04),
            (32, -2.3986118043987847e-01),
            (62, 5.2283349932167056e-01),
            (63, 1.1354998939815697e+00),
        ];
        for (i, e) in picks {
            assert!((y[i] - e).abs() < 1e-9, "y[{i}] = {}", y[i]);
        }
        let d = degrade(&probe_signal(), 2).unwrap();
        assert_eq!(d.len(), 32);
        let expected = [
            (0, 0.49921809183155186),
            (1, 0.3026762803049688),
            (5, 0.20029816140254075),
            (15, 0.6938909141620737),
            (30, -0.5524137019883781),
            (31, 0.5228334993216948),
        ];
        for (i, e) in expected {
            assert!((d[i] - e).abs() < 1e-9, "d[{i}] = {}", d[i]);
        }
    }

    #[test]
    fn steady_state_removes_step_transient() {
        let f = cheby1_design(8, 0.05, 0.3).unwrap();
        let zi: Vec<f64> = f.steady_state().iter().map(|z| z * 2.0).collect();
        let y = iir_apply_with_state(&f, &[2.0; 50], &zi);
        let dc = 2.0 * f.b.iter().sum::<f64>() / f.a.iter().sum::<f64>();
        assert!(y.iter().all(|v| (v - dc).abs() < 1e-9));
    }

    #[test]
    fn degrade_lengths_and_attenuation() {
        let x = noise(8192, 2);
        assert_eq!(degrade(&x, 1).unwrap(), x);
        assert_eq!(degrade(&x, 4).unwrap().len(), 2048);
        assert_eq!(degrade(&x, 3).unwrap().len(), 2731);
        // 0.9 of Nyquist is far above the 0.2 cutoff for r = 4.
        let hi: Vec<f64> = (0..8192).map(|t| (PI * 0.9 * t as f64).sin()).collect();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        let y = degrade(&hi, 4).unwrap();
        assert!(rms(&y[100..]) < 0.05 * rms(&hi));
    }

    #[test]
    fn degrade_then_spline_is_positive_snr() {
        let x: Vec<f64> = (0..4096)
            .map(|t| (2.0 * PI * 0.01 * t as f64).sin() + 0.5 * (2.0 * PI * 0.03 * t as f64).cos())
            .collect();
        let lo = degrade(&x, 2).unwrap();
        let up = spline_upsample(&lo, 2).unwrap();
        let s = snr(&up, &x).unwrap();
        assert!(s.is_finite() && s > 0.0, "{s}");
    }

    /// Direct DFT of one windowed frame, bins 0..=n/2.
    fn dft(frame: &[f64]) -> Vec<Complex64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn stft_matches_direct_dft() {
        let x = noise(300, 3);
        let cfg = StftConfig::new(64);
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.frames.len(), (300 - 64) / 32 + 1);
        assert_eq!(s.bins(), 33);
        let w = Window::Hann.coefficients(64);
        for (f, frame) in s.frames.iter().enumerate() {
            let windowed: Vec<f64> = x[f * 32..f * 32 + 64].iter().zip(&w).map(|(a, b)| a * b).collect();
            for (a, e) in frame.iter().zip(dft(&windowed)) {
                assert!((a - e).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn stft_sine_on_bin_and_zeros() {
        let cfg = StftConfig {
            frame_length: 64,
            hop: 32,
            window: Window::Rectangular,
        };
        let x: Vec<f64> = (0..128).map(|t| (2.0 * PI * 5.0 * t as f64 / 64.0).sin()).collect();
        let s = stft(&x, &cfg).unwrap();
        for frame in &s.frames {
            for (k, c) in frame.iter().enumerate() {
                if k == 5 {
                    assert!((c.norm() - 32.0).abs() < 1e-9);
                } else {
                    assert!(c.norm() < 1e-9, "bin {k}: {}", c.norm());
                }
            }
        }
        let z = stft(&[0.0; 100], &cfg).unwrap();
        assert!(z.frames.iter().flatten().all(|c| c.norm() == 0.0));
        assert_eq!(stft(&[0.0; 10], &cfg), Err(DspError::SignalTooShort { len: 10, frame: 64 }));
    }

    #[test]
    fn stft_is_linear() {
        let (a, b) = (noise(500, 4), noise(500, 5));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let cfg = StftConfig::new(128);
        let (sa, sb, ss) = (stft(&a, &cfg).unwrap(), stft(&b, &cfg).unwrap(), stft(&sum, &cfg).unwrap());
        for ((fa, fb), fs) in sa.frames.iter().zip(&sb.frames).zip(&ss.frames) {
            for ((x, y), z) in fa.iter().zip(fb).zip(fs) {
                assert!((x + y - z).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn snr_analytic_cases() {
        let y = noise(100, 6);
        assert_eq!(snr(&y, &y).unwrap(), f64::INFINITY);
        assert!((snr(&[0.0; 100], &y).unwrap()).abs() < 1e-9);
        // Error energy is half the reference energy.
        let x: Vec<f64> = y.iter().map(|v| v * (1.0 - 0.5f64.sqrt())).collect();
        assert!((snr(&x, &y).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(snr(&[1.0], &[0.0]), Err(DspError::ZeroReference));
        assert_eq!(snr(&[1.0], &[1.0, 2.0]), Err(DspError::LengthMismatch { left: 1, right: 2 }));
    }

    #[test]
    fn lsd_cases() {
        let cfg = StftConfig::new(256);
        let x = noise(1024, 7);
        let y = noise(1024, 8);
        assert_eq!(lsd(&x, &x, &cfg).unwrap(), 0.0);
        assert_eq!(lsd(&x, &y, &cfg).unwrap(), lsd(&y, &x, &cfg).unwrap());
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!((lsd(&doubled, &x, &cfg).unwrap() - 4f64.ln()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn snr_scale_invariant(seed in 0u64..1000, alpha in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
            let y = noise(64, seed);
            let x = noise(64, seed + 1);
            let xs: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * alpha).collect();
            prop_assert!((snr(&xs, &ys).unwrap() - snr(&x, &y).unwrap()).abs() < 1e-9);
        }
    }
}
