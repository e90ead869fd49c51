//! Randomized finite-difference checks over every differentiable op, the
//! model head and the three losses.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::label_space::{LabelRecord, LabelSpace};
use crate::loss::{loss_hd, loss_ld, loss_ld_with_mask, loss_wd, BoxSupervision, PixelSupervision};
use crate::seed::SeedStreams;
use crate::seg_head::{forward, random_tensor, roi_embed, Box, EmbeddingMap, SegModel};
use crate::tensor::{check_gradients, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Ops,
    Head,
    Losses,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "ops" => Ok(Suite::Ops),
            "head" => Ok(Suite::Head),
            "losses" => Ok(Suite::Losses),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck module {other:?} (all|ops|head|losses)"))),
        }
    }
}

type Objective = std::boxed::Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    x: Tensor,
    f: Objective,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetResult {
    pub target: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub passed: bool,
}

impl fmt::Display for TargetResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "ok" } else { "FAIL" };
        write!(f, "{:<22} trials={:<4} max_rel_err={:.3e} {verdict}", self.target, self.trials, self.max_error)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape product matches")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output coordinate contributes a distinct slope.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(tape.shape(y).to_vec().as_slice(), w.data().to_vec())?;
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], x: Tensor, op: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let w = random_tensor(rng, shape, 1.0);
    Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = op(t, x)?;
            let w = Tensor::new(t.shape(y), w.data().to_vec())?;
            weighted_sum(t, y, &w)
        }),
    }
}

/// `op(x, other)` or `op(other, x)` with the other operand constant.
fn binary(rng: &mut ChaCha8Rng, x: Tensor, other: Tensor, x_first: bool, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let seed: u64 = rng.random();
    Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let o = t.constant(other.shape(), other.data().to_vec())?;
            let y = if x_first { op(t, x, o)? } else { op(t, o, x)? };
            let w = random_tensor(&mut SeedStreams::new(seed).rng("w"), t.shape(y), 1.0);
            weighted_sum(t, y, &w)
        }),
    }
}

fn op_matmul_lhs(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[4, 2], 1.0));
    Ok(binary(rng, a, b, true, Tape::matmul))
}

fn op_matmul_rhs(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[4, 2], 1.0));
    Ok(binary(rng, b, a, false, Tape::matmul))
}

fn op_add(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0));
    Ok(binary(rng, a, b, true, Tape::add))
}

fn op_sub(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0));
    Ok(binary(rng, a, b, false, Tape::sub))
}

fn op_mul(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0));
    Ok(binary(rng, a, b, true, Tape::mul))
}

fn op_scale(rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = rng.random_range(-2.0..2.0);
    let x = random_tensor(rng, &[5], 1.0);
    let w = random_tensor(rng, &[5], 1.0);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = t.scale(x, c);
            weighted_sum(t, y, &w)
        }),
    })
}

fn op_mul_scalar_tensor(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, s) = (random_tensor(rng, &[2, 3], 1.0), random_tensor(rng, &[], 2.0));
    Ok(binary(rng, a, s, true, Tape::mul_scalar))
}

fn op_mul_scalar_scalar(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, s) = (random_tensor(rng, &[2, 3], 1.0), random_tensor(rng, &[], 2.0));
    Ok(binary(rng, s, a, false, Tape::mul_scalar))
}

fn op_add_bias(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = (random_tensor(rng, &[4, 3], 1.0), random_tensor(rng, &[3], 1.0));
    Ok(binary(rng, b, a, false, Tape::add_bias))
}

fn op_relu(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = away_from_zero(rng, &[3, 4]);
    Ok(unary(rng, &[3, 4], x, |t, x| Ok(t.relu(x))))
}

fn op_exp(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random_tensor(rng, &[3, 4], 2.0);
    Ok(unary(rng, &[3, 4], x, |t, x| Ok(t.exp(x))))
}

fn op_log(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = uniform(rng, &[3, 4], 0.2, 3.0);
    Ok(unary(rng, &[3, 4], x, Tape::log))
}

fn op_abs(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = away_from_zero(rng, &[3, 4]);
    Ok(unary(rng, &[3, 4], x, |t, x| Ok(t.abs(x))))
}

fn reduction(rng: &mut ChaCha8Rng, mean: bool) -> Case {
    let axis = match rng.random_range(0..4) {
        3 => None,
        a => Some(a),
    };
    let x = random_tensor(rng, &[3, 4, 2], 1.0);
    let seed: u64 = rng.random();
    Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = if mean { t.mean(x, axis)? } else { t.sum(x, axis)? };
            let w = random_tensor(&mut SeedStreams::new(seed).rng("w"), t.shape(y), 1.0);
            weighted_sum(t, y, &w)
        }),
    }
}

fn op_sum(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(reduction(rng, false))
}

fn op_mean(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(reduction(rng, true))
}

fn op_l2_normalize(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = away_from_zero(rng, &[3, 5]);
    Ok(unary(rng, &[3, 5], x, Tape::l2_normalize))
}

fn softmax_case(rng: &mut ChaCha8Rng, log: bool, wrt_tau: bool) -> Case {
    let logits = random_tensor(rng, &[3, 5], 1.0);
    let tau = Tensor::scalar(rng.random_range(0.05..1.0));
    let w = random_tensor(rng, &[3, 5], 1.0);
    let (x, other) = if wrt_tau { (tau, logits) } else { (logits, tau) };
    Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let o = t.constant(other.shape(), other.data().to_vec())?;
            let (z, tau) = if wrt_tau { (o, x) } else { (x, o) };
            let y = if log {
                t.log_softmax_with_temperature(z, tau)?
            } else {
                t.softmax_with_temperature(z, tau)?
            };
            weighted_sum(t, y, &w)
        }),
    }
}

fn op_softmax_logits(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(softmax_case(rng, false, false))
}

fn op_softmax_tau(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(softmax_case(rng, false, true))
}

fn op_log_softmax_logits(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(softmax_case(rng, true, false))
}

fn op_log_softmax_tau(rng: &mut ChaCha8Rng) -> Result<Case> {
    Ok(softmax_case(rng, true, true))
}

fn op_gather_rows(rng: &mut ChaCha8Rng) -> Result<Case> {
    let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let x = random_tensor(rng, &[4, 3], 1.0);
    let w = random_tensor(rng, &[6, 3], 1.0);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = t.gather_rows(x, &idx)?;
            weighted_sum(t, y, &w)
        }),
    })
}

fn op_slice(rng: &mut ChaCha8Rng) -> Result<Case> {
    let r0 = rng.random_range(0..3);
    let c0 = rng.random_range(0..4);
    let ranges = [r0..rng.random_range(r0 + 1..=4), c0..rng.random_range(c0 + 1..=5)];
    let x = random_tensor(rng, &[4, 5], 1.0);
    let w = random_tensor(rng, &[ranges[0].len(), ranges[1].len()], 1.0);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = t.slice(x, &ranges)?;
            weighted_sum(t, y, &w)
        }),
    })
}

fn op_concat(rng: &mut ChaCha8Rng) -> Result<Case> {
    let other = random_tensor(rng, &[2, 3], 1.0);
    let x = random_tensor(rng, &[3, 3], 1.0);
    let first = rng.random_bool(0.5);
    let w = random_tensor(rng, &[5, 3], 1.0);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let o = t.constant(other.shape(), other.data().to_vec())?;
            let parts = if first { [x, o] } else { [o, x] };
            let y = t.concat(&parts)?;
            weighted_sum(t, y, &w)
        }),
    })
}

fn op_reshape(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random_tensor(rng, &[2, 6], 1.0);
    let w = random_tensor(rng, &[3, 2, 2], 1.0);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let y = t.reshape(x, &[3, 2, 2])?;
            let y = t.exp(y);
            weighted_sum(t, y, &w)
        }),
    })
}

const H: usize = 4;
const W: usize = 4;
const F: usize = 6;
const C: usize = 8;
const N: usize = 5;

fn random_space(rng: &mut ChaCha8Rng) -> Result<LabelSpace> {
    let records = (0..N)
        .map(|i| LabelRecord::new(format!("l{i}"), "", random_tensor(rng, &[C], 1.0).data().to_vec()))
        .collect();
    LabelSpace::new(records)
}

fn random_labels(rng: &mut ChaCha8Rng) -> Result<PixelSupervision> {
    let mut labels: Vec<i64> = (0..H * W).map(|_| rng.random_range(-1..N as i64)).collect();
    labels[0] = 0;
    PixelSupervision::new(H, W, labels)
}

/// Smallest |pre-activation| of any hidden unit, so cases can be kept
/// clear of relu kinks.
fn relu_margin(model: &SegModel, features: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let f = tape.constant(features.shape(), features.data().to_vec())?;
    let mut x = tape.reshape(f, &[H * W, model.feature_dim()])?;
    let mut margin = f64::INFINITY;
    for &(wv, bv) in &bound.layers[..bound.layers.len() - 1] {
        x = tape.matmul(x, wv)?;
        x = tape.add_bias(x, bv)?;
        margin = tape.value(x).iter().fold(margin, |m, v| m.min(v.abs()));
        x = tape.relu(x);
    }
    Ok(margin)
}

/// Random two-layer head and features with every hidden unit at least
/// `1e-3` from its kink.
fn head_instance(rng: &mut ChaCha8Rng) -> Result<(SegModel, Tensor)> {
    loop {
        let mut model = SegModel::init(F, &[5], C, rng.random())?;
        for layer in 0..2 {
            model.bias_mut(layer).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        *model.proj.data_mut().first_mut().expect("nonempty") += 0.1;
        let features = random_tensor(rng, &[H, W, F], 1.0);
        if relu_margin(&model, &features)? > 1e-3 {
            return Ok((model, features));
        }
    }
}

enum Param {
    Weight(usize),
    Bias(usize),
    Proj,
    LogTau,
}

/// `bound` with one parameter swapped for the probe variable.
fn substitute(tape: &mut Tape, model: &SegModel, which: &Param, x: Var) -> crate::seg_head::BoundModel {
    let mut bound = model.bind(tape);
    match *which {
        Param::Weight(i) => bound.layers[i].0 = x,
        Param::Bias(i) => bound.layers[i].1 = x,
        Param::Proj => bound.proj = x,
        Param::LogTau => {
            bound.log_tau = x;
            bound.tau = tape.exp(x);
        }
    }
    bound
}

fn param_value(model: &SegModel, which: &Param) -> Tensor {
    let name = match *which {
        Param::Weight(i) => format!("layer{i}.weight"),
        Param::Bias(i) => format!("layer{i}.bias"),
        Param::Proj => "proj".into(),
        Param::LogTau => "log_tau".into(),
    };
    model.params().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).expect("parameter exists")
}

fn head_param(rng: &mut ChaCha8Rng, which: Param) -> Result<Case> {
    let (model, features) = head_instance(rng)?;
    let w = random_tensor(rng, &[H, W, C], 1.0);
    let x = param_value(&model, &which);
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let bound = substitute(t, &model, &which, x);
            let fv = t.constant(features.shape(), features.data().to_vec())?;
            let map = forward(t, &bound, fv)?;
            weighted_sum(t, map.var, &w)
        }),
    })
}

fn head_features(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features) = head_instance(rng)?;
    let w = random_tensor(rng, &[H, W, C], 1.0);
    Ok(Case {
        x: features,
        f: std::boxed::Box::new(move |t, x| {
            let bound = model.bind(t);
            let map = forward(t, &bound, x)?;
            weighted_sum(t, map.var, &w)
        }),
    })
}

fn head_weight0(rng: &mut ChaCha8Rng) -> Result<Case> {
    head_param(rng, Param::Weight(0))
}

fn head_bias0(rng: &mut ChaCha8Rng) -> Result<Case> {
    head_param(rng, Param::Bias(0))
}

fn head_weight1(rng: &mut ChaCha8Rng) -> Result<Case> {
    head_param(rng, Param::Weight(1))
}

fn random_box(rng: &mut ChaCha8Rng) -> Box {
    let r0 = rng.random_range(0..H);
    let c0 = rng.random_range(0..W);
    Box::new(r0, c0, rng.random_range(r0 + 1..=H), rng.random_range(c0 + 1..=W))
}

fn head_roi(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, _) = head_instance(rng)?;
    let b = random_box(rng);
    let w = random_tensor(rng, &[C], 1.0);
    Ok(Case {
        x: random_tensor(rng, &[H, W, C], 1.0),
        f: std::boxed::Box::new(move |t, x| {
            let bound = model.bind(t);
            let map = EmbeddingMap::from_var(t, x)?;
            let v = roi_embed(t, &bound, &map, &b)?;
            weighted_sum(t, v, &w)
        }),
    })
}

fn pixel_case(rng: &mut ChaCha8Rng) -> Result<(LabelSpace, PixelSupervision, Tensor, f64)> {
    Ok((random_space(rng)?, random_labels(rng)?, random_tensor(rng, &[H, W, C], 1.0), rng.random_range(0.05..1.0)))
}

fn loss_hd_map(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (space, sup, x, tau) = pixel_case(rng)?;
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let tau = t.scalar_constant(tau);
            let map = EmbeddingMap::from_var(t, x)?;
            loss_hd(t, &map, &sup, &space, tau)
        }),
    })
}

fn loss_hd_log_tau(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features) = head_instance(rng)?;
    let model = model.with_tau(rng.random_range(0.05..1.0))?;
    let space = random_space(rng)?;
    let sup = random_labels(rng)?;
    Ok(Case {
        x: param_value(&model, &Param::LogTau),
        f: std::boxed::Box::new(move |t, x| {
            let bound = substitute(t, &model, &Param::LogTau, x);
            let fv = t.constant(features.shape(), features.data().to_vec())?;
            let map = forward(t, &bound, fv)?;
            loss_hd(t, &map, &sup, &space, bound.tau)
        }),
    })
}

/// The kept set is chosen once at the base point and then frozen, which
/// is exactly how the training step differentiates it.
fn loss_ld_frozen(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (space, sup, x, tau) = pixel_case(rng)?;
    let mut tape = Tape::new();
    let tv = tape.scalar_constant(tau);
    let e = tape.constant(x.shape(), x.data().to_vec())?;
    let map = EmbeddingMap::from_var(&tape, e)?;
    let (_, kept) = loss_ld(&mut tape, &map, &sup, &space, tv, crate::loss::DEFAULT_KEEP_FRACTION)?;
    Ok(Case {
        x,
        f: std::boxed::Box::new(move |t, x| {
            let tau = t.scalar_constant(tau);
            let map = EmbeddingMap::from_var(t, x)?;
            loss_ld_with_mask(t, &map, &sup, &space, tau, &kept.mask)
        }),
    })
}

fn wd_case(rng: &mut ChaCha8Rng) -> Result<(SegModel, Tensor, BoxSupervision)> {
    let (model, features) = head_instance(rng)?;
    let n = rng.random_range(1..=3);
    let boxes = (0..n).map(|_| random_box(rng)).collect();
    let teachers = (0..n).map(|_| random_tensor(rng, &[C], 1.0).data().to_vec()).collect();
    Ok((model, features, BoxSupervision::new(boxes, teachers)?))
}

fn loss_wd_features(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features, sup) = wd_case(rng)?;
    Ok(Case {
        x: features,
        f: std::boxed::Box::new(move |t, x| {
            let bound = model.bind(t);
            let map = forward(t, &bound, x)?;
            loss_wd(t, &bound, &map, &sup)
        }),
    })
}

fn loss_wd_proj(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features, sup) = wd_case(rng)?;
    Ok(Case {
        x: model.proj.clone(),
        f: std::boxed::Box::new(move |t, x| {
            let bound = substitute(t, &model, &Param::Proj, x);
            let fv = t.constant(features.shape(), features.data().to_vec())?;
            let map = forward(t, &bound, fv)?;
            loss_wd(t, &bound, &map, &sup)
        }),
    })
}

fn loss_wd_weight0(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features, sup) = wd_case(rng)?;
    Ok(Case {
        x: param_value(&model, &Param::Weight(0)),
        f: std::boxed::Box::new(move |t, x| {
            let bound = substitute(t, &model, &Param::Weight(0), x);
            let fv = t.constant(features.shape(), features.data().to_vec())?;
            let map = forward(t, &bound, fv)?;
            loss_wd(t, &bound, &map, &sup)
        }),
    })
}

fn loss_hd_through_head(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (model, features) = head_instance(rng)?;
    let space = random_space(rng)?;
    let sup = random_labels(rng)?;
    Ok(Case {
        x: param_value(&model, &Param::Weight(0)),
        f: std::boxed::Box::new(move |t, x| {
            let bound = substitute(t, &model, &Param::Weight(0), x);
            let fv = t.constant(features.shape(), features.data().to_vec())?;
            let map = forward(t, &bound, fv)?;
            loss_hd(t, &map, &sup, &space, bound.tau)
        }),
    })
}

fn targets(suite: Suite) -> Vec<(&'static str, Builder)> {
    let ops: [(&'static str, Builder); 24] = [
        ("matmul.lhs", op_matmul_lhs),
        ("matmul.rhs", op_matmul_rhs),
        ("add", op_add),
        ("sub", op_sub),
        ("mul", op_mul),
        ("scale", op_scale),
        ("mul_scalar.tensor", op_mul_scalar_tensor),
        ("mul_scalar.scalar", op_mul_scalar_scalar),
        ("add_bias", op_add_bias),
        ("relu", op_relu),
        ("exp", op_exp),
        ("log", op_log),
        ("abs", op_abs),
        ("sum", op_sum),
        ("mean", op_mean),
        ("l2_normalize", op_l2_normalize),
        ("softmax.logits", op_softmax_logits),
        ("softmax.tau", op_softmax_tau),
        ("log_softmax.logits", op_log_softmax_logits),
        ("log_softmax.tau", op_log_softmax_tau),
        ("gather_rows", op_gather_rows),
        ("slice", op_slice),
        ("concat", op_concat),
        ("reshape", op_reshape),
    ];
    let head: [(&'static str, Builder); 5] = [
        ("head.features", head_features),
        ("head.layer0.weight", head_weight0),
        ("head.layer0.bias", head_bias0),
        ("head.layer1.weight", head_weight1),
        ("head.roi_embed", head_roi),
    ];
    let losses: [(&'static str, Builder); 7] = [
        ("loss_hd.embeddings", loss_hd_map),
        ("loss_hd.log_tau", loss_hd_log_tau),
        ("loss_hd.layer0.weight", loss_hd_through_head),
        ("loss_ld.frozen_mask", loss_ld_frozen),
        ("loss_wd.features", loss_wd_features),
        ("loss_wd.proj", loss_wd_proj),
        ("loss_wd.layer0.weight", loss_wd_weight0),
    ];
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Ops) {
        out.extend(ops);
    }
    if matches!(suite, Suite::All | Suite::Head) {
        out.extend(head);
    }
    if matches!(suite, Suite::All | Suite::Losses) {
        out.extend(losses);
    }
    out
}

pub fn target_names(suite: Suite) -> Vec<&'static str> {
    targets(suite).into_iter().map(|(n, _)| n).collect()
}

/// Runs `trials` random instances per target. Trial `k` of target `name`
/// draws from its own stream, so results do not depend on which other
/// targets run.
pub fn run_suite(suite: Suite, trials: usize, eps: f64, tolerance: f64, seed: u64) -> Result<Vec<TargetResult>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one trial".into()));
    }
    let streams = SeedStreams::new(seed).child("gradcheck");
    targets(suite)
        .into_iter()
        .map(|(target, build)| {
            let mut max_error = 0.0f64;
            for k in 0..trials {
                let mut rng = streams.child(target).rng(&k.to_string());
                let case = build(&mut rng)?;
                let err = check_gradients(&case.f, &case.x, eps)?;
                max_error = if err.is_nan() { f64::INFINITY } else { max_error.max(err) };
            }
            Ok(TargetResult {
                target,
                trials,
                max_error,
                passed: max_error <= tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_parses() {
        assert_eq!("losses".parse::<Suite>().unwrap(), Suite::Losses);
        assert!("everything".parse::<Suite>().is_err());
        assert_eq!(target_names(Suite::All).len(), 36);
    }

    #[test]
    fn every_target_passes_a_few_trials() {
        let results = run_suite(Suite::All, 3, DEFAULT_EPS, DEFAULT_TOLERANCE, 11).unwrap();
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn coarse_step_is_caught() {
        let results = run_suite(Suite::Ops, 5, 1e-1, DEFAULT_TOLERANCE, 11).unwrap();
        assert!(results.iter().any(|r| !r.passed));
    }

    #[test]
    fn stable_for_fixed_seed() {
        let a = run_suite(Suite::Head, 1, DEFAULT_EPS, DEFAULT_TOLERANCE, 5).unwrap();
        let b = run_suite(Suite::Head, 1, DEFAULT_EPS, DEFAULT_TOLERANCE, 5).unwrap();
        assert_eq!(a, b);
    }
}
