//! Finite-difference gradient suites for every differentiable component.
//!
//! Each case builds a scalar objective `mean(w ⊙ y)` over a component's
//! output `y` with fixed random weights `w` and compares tape gradients with
//! central differences at `h = 1e-5`.
//!
//! The full-model case draws its input and every zero-initialized parameter
//! (TFiLM projections, final stage) from `±0.1`. Larger magnitudes push the
//! smallest LSTM gradients below what a central difference can resolve in
//! `f64` (roundoff in `f(p ± h)` is about `ε·|f|/h`), which fails the relative
//! check without any error in the gradient itself.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, AutodiffError, GradReport, Tape, Var};
use crate::layers::{self, ConvGeometry, Direction, LayerError, LstmCell, LstmCellVars, Mode, Padding};
use crate::model::{build_model, ModelConfig, ModelError};
use crate::tensor::Tensor;
use crate::tfilm::{self, TfilmLayerParams, TfilmVars};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Layers,
    Tfilm,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Layers, Suite::Tfilm, Suite::Model];
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub suite: Suite,
    pub case: String,
    pub report: GradReport,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).expect("positive extents")
}

fn weighted_mean(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var, LayerError> {
    let wy = tape.mul_const(y, w.clone())?;
    Ok(tape.mean(wy))
}

fn case(
    suite: Suite,
    name: impl Into<String>,
    report: Result<GradReport, AutodiffError>,
) -> Result<CaseReport, AutodiffError> {
    Ok(CaseReport {
        suite,
        case: name.into(),
        report: report?,
    })
}

fn layer_cases(seed: u64) -> Result<Vec<CaseReport>, AutodiffError> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::new();

    for g in [
        ConvGeometry::new(1, 1, Padding::Same),
        ConvGeometry::new(2, 2, Padding::Same),
        ConvGeometry::new(3, 2, Padding::Valid),
    ] {
        let x = uniform(vec![2, 32, 4], 1.0, &mut rng);
        let w = uniform(vec![3, 4, 5], 1.0, &mut rng);
        let b = uniform(vec![3], 1.0, &mut rng);
        let t_out = g.output_len(32, 5).expect("valid geometry");
        let weights = uniform(vec![2, t_out, 3], 1.0, &mut rng);
        let report = finite_diff_check(
            |tape, v| {
                let y = layers::conv1d_var(tape, v[0], v[1], v[2], g)?;
                weighted_mean(tape, y, &weights)
            },
            &[x.with_name("x"), w.with_name("weight"), b.with_name("bias")],
            STEP,
            TOLERANCE,
        );
        let name = format!(
            "conv1d stride={} dilation={} padding={:?}",
            g.stride, g.dilation, g.padding
        );
        out.push(case(Suite::Layers, name, report)?);
    }

    let x = uniform(vec![2, 32, 4], 1.0, &mut rng);
    let weights = uniform(vec![2, 15, 4], 1.0, &mut rng);
    let report = finite_diff_check(
        |tape, v| {
            let y = layers::maxpool1d_var(tape, v[0], 4, 2)?;
            weighted_mean(tape, y, &weights)
        },
        &[x.with_name("x")],
        STEP,
        TOLERANCE,
    );
    out.push(case(Suite::Layers, "maxpool1d extent=4 stride=2", report)?);

    let cell = LstmCell::init(4, 5, &mut rng);
    let x = uniform(vec![2, 4], 1.0, &mut rng);
    let h = uniform(vec![2, 5], 1.0, &mut rng);
    let c = uniform(vec![2, 5], 1.0, &mut rng);
    let wh = uniform(vec![2, 5], 1.0, &mut rng);
    let wc = uniform(vec![2, 5], 1.0, &mut rng);
    let report = finite_diff_check(
        |tape, v| {
            let vars = LstmCellVars {
                w_ih: v[3],
                w_hh: v[4],
                bias: v[5],
            };
            let (h2, c2) = layers::lstm_step_var(tape, v[0], Some((v[1], v[2])), &vars)?;
            let a = weighted_mean(tape, h2, &wh)?;
            let b = weighted_mean(tape, c2, &wc)?;
            Ok::<_, LayerError>(tape.add(a, b)?)
        },
        &[
            x.with_name("x"),
            h.with_name("h"),
            c.with_name("c"),
            cell.w_ih.with_name("w_ih"),
            cell.w_hh.with_name("w_hh"),
            cell.bias.with_name("bias"),
        ],
        STEP,
        TOLERANCE,
    );
    out.push(case(Suite::Layers, "lstm step", report)?);

    let x = uniform(vec![2, 16, 4], 1.0, &mut rng);
    let weights = uniform(vec![2, 32, 2], 1.0, &mut rng);
    let report = finite_diff_check(
        |tape, v| {
            let y = layers::subpixel_shuffle_var(tape, v[0], 2)?;
            weighted_mean(tape, y, &weights)
        },
        &[x.with_name("x")],
        STEP,
        TOLERANCE,
    );
    out.push(case(Suite::Layers, "subpixel shuffle r=2", report)?);

    let x = uniform(vec![2, 32, 4], 1.0, &mut rng);
    let weights = uniform(vec![2, 32, 4], 1.0, &mut rng);
    let report = finite_diff_check(
        |tape, v| {
            let y = tape.relu(v[0]);
            let y = layers::dropout_var(tape, y, 0.5, 1, Mode::Eval)?;
            weighted_mean(tape, y, &weights)
        },
        &[x.with_name("x")],
        STEP,
        TOLERANCE,
    );
    out.push(case(Suite::Layers, "relu + dropout (eval)", report)?);
    Ok(out)
}

fn tfilm_cases(seed: u64) -> Result<Vec<CaseReport>, AutodiffError> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::new();
    for dir in [Direction::Forward, Direction::Bidirectional] {
        let p = TfilmLayerParams::init(4, 4, 4, dir, &mut rng);
        let x = uniform(vec![2, 32, 4], 1.0, &mut rng);
        let weights = uniform(vec![2, 32, 4], 1.0, &mut rng);
        let mut params = vec![
            x.with_name("x"),
            uniform(p.proj_w.shape().to_vec(), 1.0, &mut rng).with_name("proj.weight"),
            uniform(p.proj_b.shape().to_vec(), 1.0, &mut rng).with_name("proj.bias"),
        ];
        for (tag, cell) in std::iter::once(("fwd", &p.lstm.forward)).chain(p.lstm.backward.as_ref().map(|c| ("bwd", c))) {
            params.push(cell.w_ih.clone().with_name(format!("{tag}.w_ih")));
            params.push(cell.w_hh.clone().with_name(format!("{tag}.w_hh")));
            params.push(cell.bias.clone().with_name(format!("{tag}.bias")));
        }
        let report = finite_diff_check(
            |tape, v| {
                let cell = |i: usize| LstmCellVars {
                    w_ih: v[3 + 3 * i],
                    w_hh: v[4 + 3 * i],
                    bias: v[5 + 3 * i],
                };
                let vars = TfilmVars {
                    block_len: 4,
                    forward: cell(0),
                    backward: (v.len() > 6).then(|| cell(1)),
                    proj_w: v[1],
                    proj_b: v[2],
                };
                let y = tfilm::tfilm_var(tape, v[0], &vars)?;
                weighted_mean(tape, y, &weights)
            },
            &params,
            STEP,
            TOLERANCE,
        );
        out.push(case(Suite::Tfilm, format!("tfilm end-to-end {dir:?}"), report)?);
    }
    Ok(out)
}

/// Miniature configuration used by the model suite.
pub fn miniature_config(bidirectional: bool) -> ModelConfig {
    ModelConfig {
        blocks: 2,
        patch_length: 64,
        channel_cap: 8,
        blocks_per_tfilm: 4,
        bidirectional,
        ..ModelConfig::default()
    }
}

/// End-to-end check of a model in eval mode.
pub fn model_case(cfg: &ModelConfig, seed: u64) -> Result<GradReport, AutodiffError> {
    let mut model = build_model(cfg, seed).map_err(|e| AutodiffError::Forward(Box::new(e)))?;
    let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(1));
    let values: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            Tensor::from_fn(p.shape().to_vec(), |i| match p.data()[i] {
                0.0 => rng.random_range(-0.1..0.1),
                v => v,
            })
            .expect("same shape")
        })
        .collect();
    model
        .set_params(values)
        .map_err(|e| AutodiffError::Forward(Box::new(e)))?;
    let t = cfg.patch_length;
    let x = uniform(vec![1, t, cfg.input_channels], 0.1, &mut rng);
    let weights = uniform(vec![1, t, 1], 1.0, &mut rng);
    finite_diff_check(
        |tape, v| {
            let xv = tape.constant(x.clone());
            let y = model.forward_var(tape, v, xv, Mode::Eval, 0)?;
            Ok::<_, ModelError>(weighted_mean(tape, y, &weights)?)
        },
        model.params(),
        STEP,
        TOLERANCE,
    )
}

fn model_cases(seed: u64) -> Result<Vec<CaseReport>, AutodiffError> {
    [false, true]
        .into_iter()
        .map(|bi| {
            let name = format!("model K=2 T=64 cap=8 bidirectional={bi}");
            case(Suite::Model, name, model_case(&miniature_config(bi), seed))
        })
        .collect()
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CaseReport>, AutodiffError> {
    match suite {
        Suite::Layers => layer_cases(seed),
        Suite::Tfilm => tfilm_cases(seed),
        Suite::Model => model_cases(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_suite_passes() {
        for c in run_suite(Suite::Layers, 11).unwrap() {
            assert!(c.passed(), "{c:#?}");
        }
    }

    #[test]
    fn tfilm_suite_passes() {
        for c in run_suite(Suite::Tfilm, 12).unwrap() {
            assert!(c.passed(), "{c:#?}");
        }
    }
}
