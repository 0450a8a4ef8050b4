//! Central finite-difference checks of every operator's backward pass.
//!
//! Each check builds a small random instance in `f64`, reduces the operator
//! output to a scalar with a random cotangent (`L = Σ r ⊙ y`), and compares
//! the analytic gradient of every input and parameter slot against
//! `(L(θ + h) − L(θ − h)) / 2h` with `h = 1e-5`. The finite differences only
//! ever call forward functions.
//!
//! The per-element error is `|a − n| / max(|a|, |n|, 1e-4)`: relative for
//! gradients above `1e-4` in magnitude, absolute (scaled) below that, where
//! central differences are dominated by rounding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, DeformableConvSpec, Mode, RunningStats};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor5};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-4;
/// Minimum distance of inputs from ReLU kinks and of sampling coordinates
/// from integer lattice planes.
pub const NUDGE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradOp {
    Conv3d,
    Trilinear,
    DeformableConv3d,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Linear,
    SigmoidBce,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Conv3d,
        GradOp::Trilinear,
        GradOp::DeformableConv3d,
        GradOp::BatchNorm,
        GradOp::Relu,
        GradOp::GlobalAvgPool,
        GradOp::Linear,
        GradOp::SigmoidBce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv3d => "conv3d",
            GradOp::Trilinear => "trilinear",
            GradOp::DeformableConv3d => "deformable_conv3d",
            GradOp::BatchNorm => "batchnorm",
            GradOp::Relu => "relu",
            GradOp::GlobalAvgPool => "global_avg_pool",
            GradOp::Linear => "linear",
            GradOp::SigmoidBce => "sigmoid_bce",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = GradOp::ALL.iter().map(|o| o.name()).collect();
                Error::Argument(format!("unknown operator `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Result for one gradient slot (input or parameter) of one operator.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub op: GradOp,
    pub case: String,
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    pub seed: u64,
    /// Scales every analytic gradient by `1 + fault`; used to confirm the
    /// harness detects a broken backward pass.
    pub fault: Option<f64>,
}

struct Problem<'a> {
    case: String,
    names: Vec<&'static str>,
    slots: Vec<Vec<f64>>,
    loss: Box<dyn Fn(&[Vec<f64>]) -> Result<f64> + 'a>,
    analytic: Box<dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + 'a>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate(op: GradOp, p: Problem<'_>, fault: Option<f64>) -> Result<Vec<GroupReport>> {
    let mut analytic = (p.analytic)(&p.slots)?;
    if let Some(f) = fault {
        analytic.iter_mut().flatten().for_each(|g| *g *= 1.0 + f);
    }
    let mut slots = p.slots.clone();
    let mut reports = Vec::new();
    for (s, name) in p.names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..slots[s].len() {
            let orig = slots[s][i];
            slots[s][i] = orig + STEP;
            let plus = (p.loss)(&slots)?;
            slots[s][i] = orig - STEP;
            let minus = (p.loss)(&slots)?;
            slots[s][i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[s][i], numeric));
        }
        reports.push(GroupReport {
            op,
            case: p.case.clone(),
            group: name.to_string(),
            checked: slots[s].len(),
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

fn tensor(shape: Shape, data: &[f64]) -> Result<Tensor5<f64>> {
    Tensor5::from_vec(shape, data.to_vec())
}

fn randn(shape: Shape, rng: &mut Rng, std: f64) -> Vec<f64> {
    (0..shape.numel()).map(|_| std * rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moves values within `NUDGE` of zero away from the kink.
fn nudge_off_zero(v: &mut [f64]) {
    for x in v {
        if x.abs() < NUDGE {
            *x += if *x >= 0.0 { NUDGE } else { -NUDGE };
        }
    }
}

fn frac_distance(v: f64) -> f64 {
    let f = v - v.floor();
    f.min(1.0 - f)
}

fn conv_problem<'a>(case: &str, x_shape: Shape, spec: ConvSpec, rng: &mut Rng) -> Result<Problem<'a>> {
    let out = spec.output_shape(x_shape)?;
    let r = randn(out, rng, 1.0);
    let r2 = r.clone();
    let wshape = spec.weight_shape();
    Ok(Problem {
        case: case.into(),
        names: vec!["x", "weight", "bias"],
        slots: vec![randn(x_shape, rng, 1.0), randn(wshape, rng, 0.5), randn(Shape::new(1, 1, 1, 1, spec.out_channels), rng, 0.5)],
        loss: Box::new(move |s| {
            let y = ops::conv3d_forward(&tensor(x_shape, &s[0])?, &tensor(wshape, &s[1])?, &s[2], &spec)?;
            Ok(dot(y.data(), &r))
        }),
        analytic: Box::new(move |s| {
            let g = tensor(out, &r2)?;
            let grads = ops::conv3d_backward(&g, &tensor(x_shape, &s[0])?, &tensor(wshape, &s[1])?, &spec)?;
            Ok(vec![grads.grad_x.into_data(), grads.grad_weight.into_data(), grads.grad_bias])
        }),
    })
}

fn trilinear_problem<'a>(rng: &mut Rng) -> Result<Problem<'a>> {
    let xs = Shape::new(1, 2, 4, 4, 4);
    let queries = 12;
    // Includes points straddling the volume faces so the zero-padding path is covered.
    let mut q: Vec<f64> = (0..3 * queries).map(|_| rng.uniform_range(-0.9, 3.9)).collect();
    q[..3].copy_from_slice(&[1.3, 2.7, 0.5]);
    for v in &mut q {
        if frac_distance(*v) < NUDGE {
            *v += NUDGE;
        }
    }
    let r = randn(Shape::new(1, 1, 1, 1, queries), rng, 1.0);
    let r2 = r.clone();
    let channel = |j: usize| j % 2;
    Ok(Problem {
        case: "x 1x2x4x4x4, 12 queries".into(),
        names: vec!["x", "q"],
        slots: vec![randn(xs, rng, 1.0), q],
        loss: Box::new(move |s| {
            let x = tensor(xs, &s[0])?;
            let mut total = 0.0;
            for j in 0..queries {
                let qj = [s[1][3 * j], s[1][3 * j + 1], s[1][3 * j + 2]];
                total += r[j] * ops::trilinear_sample(&x, 0, channel(j), qj)?;
            }
            Ok(total)
        }),
        analytic: Box::new(move |s| {
            let x = tensor(xs, &s[0])?;
            let mut gx = Tensor5::zeros(xs)?;
            let mut gq = vec![0.0; 3 * queries];
            for j in 0..queries {
                let qj = [s[1][3 * j], s[1][3 * j + 1], s[1][3 * j + 2]];
                let d = ops::trilinear_sample_backward(r2[j], &x, 0, channel(j), qj, &mut gx)?;
                gq[3 * j..3 * j + 3].copy_from_slice(&d);
            }
            Ok(vec![gx.into_data(), gq])
        }),
    })
}

fn deform_problem<'a>(case: &str, x_shape: Shape, base: ConvSpec, rng: &mut Rng) -> Result<Problem<'a>> {
    let spec = DeformableConvSpec::new(base);
    let pred = spec.offset_predictor();
    let wshape = base.weight_shape();
    let owshape = pred.weight_shape();
    let out = base.output_shape(x_shape)?;
    let x = randn(x_shape, rng, 1.0);
    let ow = randn(owshape, rng, 0.01);
    // Fractional offsets keep every tap strictly inside a lattice cell.
    let ob: Vec<f64> = (0..pred.out_channels)
        .map(|_| {
            let whole = (rng.uniform() * 3.0).floor() - 1.0;
            whole + rng.uniform_range(0.3, 0.7)
        })
        .collect();
    let offsets = ops::conv3d_forward(&tensor(x_shape, &x)?, &tensor(owshape, &ow)?, &ob, &pred)?;
    let closest = offsets.data().iter().map(|&v| frac_distance(v)).fold(f64::INFINITY, f64::min);
    if closest < NUDGE {
        return Err(Error::NumericInput(format!(
            "sampling offset within {closest:.2e} of a lattice plane"
        )));
    }
    let r = randn(out, rng, 1.0);
    let r2 = r.clone();
    Ok(Problem {
        case: case.into(),
        names: vec!["x", "weight", "bias", "offset_weight", "offset_bias"],
        slots: vec![
            x,
            randn(wshape, rng, 0.5),
            randn(Shape::new(1, 1, 1, 1, base.out_channels), rng, 0.5),
            ow,
            ob,
        ],
        loss: Box::new(move |s| {
            let (y, _) = ops::deformable_conv3d_forward(
                &tensor(x_shape, &s[0])?,
                &tensor(wshape, &s[1])?,
                &s[2],
                &tensor(owshape, &s[3])?,
                &s[4],
                &spec,
            )?;
            Ok(dot(y.data(), &r))
        }),
        analytic: Box::new(move |s| {
            let x = tensor(x_shape, &s[0])?;
            let w = tensor(wshape, &s[1])?;
            let ow = tensor(owshape, &s[3])?;
            let (_, offsets) = ops::deformable_conv3d_forward(&x, &w, &s[2], &ow, &s[4], &spec)?;
            let g = tensor(out, &r2)?;
            let d = ops::deformable_conv3d_backward(&g, &x, &w, &ow, &offsets, &spec)?;
            Ok(vec![
                d.grad_x.into_data(),
                d.grad_weight.into_data(),
                d.grad_bias,
                d.grad_offset_weight.into_data(),
                d.grad_offset_bias,
            ])
        }),
    })
}

fn batchnorm_problem<'a>(mode: Mode, rng: &mut Rng) -> Result<Problem<'a>> {
    let xs = Shape::new(2, 3, 3, 3, 3);
    let c = xs.c();
    let r = randn(xs, rng, 1.0);
    let r2 = r.clone();
    let stats = RunningStats {
        mean: randn(Shape::new(1, 1, 1, 1, c), rng, 0.5),
        var: (0..c).map(|_| rng.uniform_range(0.5, 2.0)).collect(),
    };
    let stats2 = stats.clone();
    let case = match mode {
        Mode::Train => "train mode, x 2x3x3x3x3",
        Mode::Eval => "eval mode, x 2x3x3x3x3",
    };
    Ok(Problem {
        case: case.into(),
        names: vec!["x", "gamma", "beta"],
        slots: vec![
            randn(xs, rng, 2.0).iter().map(|v| v + 1.0).collect(),
            (0..c).map(|_| rng.uniform_range(0.5, 1.5)).collect(),
            randn(Shape::new(1, 1, 1, 1, c), rng, 0.5),
        ],
        loss: Box::new(move |s| {
            let mut st = stats.clone();
            let (y, _) = ops::batchnorm_forward(&tensor(xs, &s[0])?, &s[1], &s[2], &mut st, mode)?;
            Ok(dot(y.data(), &r))
        }),
        analytic: Box::new(move |s| {
            let mut st = stats2.clone();
            let (_, saved) = ops::batchnorm_forward(&tensor(xs, &s[0])?, &s[1], &s[2], &mut st, mode)?;
            let (gx, gg, gb) = ops::batchnorm_backward(&tensor(xs, &r2)?, &saved, &s[1])?;
            Ok(vec![gx.into_data(), gg, gb])
        }),
    })
}

fn relu_problem<'a>(rng: &mut Rng) -> Result<Problem<'a>> {
    let xs = Shape::new(2, 2, 3, 3, 3);
    let mut x = randn(xs, rng, 1.0);
    nudge_off_zero(&mut x);
    let r = randn(xs, rng, 1.0);
    let r2 = r.clone();
    Ok(Problem {
        case: "x 2x2x3x3x3".into(),
        names: vec!["x"],
        slots: vec![x],
        loss: Box::new(move |s| Ok(dot(ops::relu(&tensor(xs, &s[0])?).data(), &r))),
        analytic: Box::new(move |s| {
            let g = ops::relu_backward(&tensor(xs, &r2)?, &tensor(xs, &s[0])?)?;
            Ok(vec![g.into_data()])
        }),
    })
}

fn pool_problem<'a>(rng: &mut Rng) -> Result<Problem<'a>> {
    let xs = Shape::new(2, 3, 2, 3, 2);
    let os = Shape::new(2, 3, 1, 1, 1);
    let r = randn(os, rng, 1.0);
    let r2 = r.clone();
    Ok(Problem {
        case: "x 2x3x2x3x2".into(),
        names: vec!["x"],
        slots: vec![randn(xs, rng, 1.0)],
        loss: Box::new(move |s| Ok(dot(ops::global_avg_pool(&tensor(xs, &s[0])?)?.data(), &r))),
        analytic: Box::new(move |s| {
            let _ = &s[0];
            Ok(vec![ops::global_avg_pool_backward(&tensor(os, &r2)?, xs)?.into_data()])
        }),
    })
}

fn linear_problem<'a>(rng: &mut Rng) -> Result<Problem<'a>> {
    let xs = Shape::new(2, 4, 2, 1, 1);
    let ws = Shape::new(3, 8, 1, 1, 1);
    let os = Shape::new(2, 3, 1, 1, 1);
    let r = randn(os, rng, 1.0);
    let r2 = r.clone();
    Ok(Problem {
        case: "x 2x4x2x1x1 -> 3".into(),
        names: vec!["x", "weight", "bias"],
        slots: vec![randn(xs, rng, 1.0), randn(ws, rng, 1.0), randn(Shape::new(1, 1, 1, 1, 3), rng, 1.0)],
        loss: Box::new(move |s| Ok(dot(ops::linear(&tensor(xs, &s[0])?, &tensor(ws, &s[1])?, &s[2])?.data(), &r))),
        analytic: Box::new(move |s| {
            let (gx, gw, gb) = ops::linear_backward(&tensor(os, &r2)?, &tensor(xs, &s[0])?, &tensor(ws, &s[1])?)?;
            Ok(vec![gx.into_data(), gw.into_data(), gb])
        }),
    })
}

fn bce_problem<'a>(rng: &mut Rng) -> Result<Problem<'a>> {
    let labels = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let labels2 = labels.clone();
    Ok(Problem {
        case: "6 logits".into(),
        names: vec!["logits"],
        slots: vec![randn(Shape::new(1, 1, 1, 1, 6), rng, 3.0)],
        loss: Box::new(move |s| ops::bce_with_logits(&s[0], &labels)),
        analytic: Box::new(move |s| Ok(vec![ops::bce_with_logits_backward(&s[0], &labels2)?])),
    })
}

fn problems(op: GradOp, rng: &mut Rng) -> Result<Vec<Problem<'static>>> {
    let k3 = [3, 3, 3];
    Ok(match op {
        GradOp::Conv3d => vec![
            conv_problem("x 2x3x5x5x5, k3 s1", Shape::new(2, 3, 5, 5, 5), ConvSpec::new(3, 2, k3), rng)?,
            conv_problem("x 1x4x6x6x6, k3 s2", Shape::new(1, 4, 6, 6, 6), ConvSpec::new(4, 2, k3).with_stride(2), rng)?,
            conv_problem("x 1x2x6x5x6, k3 d2 p2", Shape::new(1, 2, 6, 5, 6), ConvSpec::new(2, 3, k3).with_dilation(2).with_padding([2, 2, 2]), rng)?,
        ],
        GradOp::Trilinear => vec![trilinear_problem(rng)?],
        GradOp::DeformableConv3d => vec![
            deform_problem("x 1x1x5x5x5, k3 s1", Shape::new(1, 1, 5, 5, 5), ConvSpec::new(1, 2, k3), rng)?,
            deform_problem("x 2x2x4x4x4, k3 s2", Shape::new(2, 2, 4, 4, 4), ConvSpec::new(2, 2, k3).with_stride(2), rng)?,
        ],
        GradOp::BatchNorm => vec![batchnorm_problem(Mode::Train, rng)?, batchnorm_problem(Mode::Eval, rng)?],
        GradOp::Relu => vec![relu_problem(rng)?],
        GradOp::GlobalAvgPool => vec![pool_problem(rng)?],
        GradOp::Linear => vec![linear_problem(rng)?],
        GradOp::SigmoidBce => vec![bce_problem(rng)?],
    })
}

/// Checks one operator; one report per (case, gradient slot).
pub fn check(op: GradOp, opts: Options) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::new(opts.seed).split_by_name(op.name());
    let mut reports = Vec::new();
    for p in problems(op, &mut rng)? {
        reports.extend(evaluate(op, p, opts.fault)?);
    }
    Ok(reports)
}

pub fn check_all(ops: &[GradOp], opts: Options) -> Result<Vec<GroupReport>> {
    let mut out = Vec::new();
    for &op in ops {
        out.extend(check(op, opts)?);
    }
    Ok(out)
}
