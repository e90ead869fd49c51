//! SGD with momentum under a polynomial learning-rate decay, and the
//! training loop over balanced multi-dataset batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::LabelSpace;
use crate::loss::{loss_hd, loss_ld, loss_wd, mean_of, total_loss, LossBreakdown, LossTerms};
use crate::seed::SeedStreams;
use crate::seg_head::{forward, SegModel};
use crate::synth::{BalancedBatches, Pool, Tier};
use crate::tensor::Tape;

/// Which loss the noisy-mask tier trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoisyLoss {
    /// Top-loss rejection.
    #[default]
    Ld,
    /// Plain pixel cross-entropy on the noisy labels.
    Hd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSwitches {
    #[serde(default = "yes")]
    pub hd: bool,
    #[serde(default = "yes")]
    pub ld: bool,
    #[serde(default = "yes")]
    pub wd: bool,
}

fn yes() -> bool {
    true
}

impl Default for TierSwitches {
    fn default() -> Self {
        TierSwitches { hd: true, ld: true, wd: true }
    }
}

impl TierSwitches {
    pub fn enabled(&self, tier: Tier) -> bool {
        match tier {
            Tier::Hd => self.hd,
            Tier::Ld => self.ld,
            Tier::Wd => self.wd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_lr0")]
    pub lr0: f64,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "TrainConfig::default_poly_power")]
    pub poly_power: f64,
    pub total_steps: usize,
    #[serde(default = "TrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "TrainConfig::default_tau_init")]
    pub tau_init: f64,
    #[serde(default)]
    pub terms: TierSwitches,
    #[serde(default)]
    pub noisy_loss: NoisyLoss,
}

impl TrainConfig {
    fn default_lr0() -> f64 {
        0.01
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_poly_power() -> f64 {
        0.9
    }
    fn default_batch_size() -> usize {
        4
    }
    fn default_keep_fraction() -> f64 {
        0.7
    }
    fn default_tau_init() -> f64 {
        0.07
    }

    pub fn with_steps(total_steps: usize) -> Self {
        TrainConfig {
            lr0: Self::default_lr0(),
            momentum: Self::default_momentum(),
            poly_power: Self::default_poly_power(),
            total_steps,
            batch_size: Self::default_batch_size(),
            keep_fraction: Self::default_keep_fraction(),
            tau_init: Self::default_tau_init(),
            terms: TierSwitches::default(),
            noisy_loss: NoisyLoss::default(),
        }
    }

    /// Every violated constraint, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(format!("{prefix}{msg}"));
            }
        };
        check(self.lr0 > 0.0 && self.lr0.is_finite(), format!("lr0: must be positive, got {}", self.lr0));
        check((0.0..1.0).contains(&self.momentum), format!("momentum: must lie in [0, 1), got {}", self.momentum));
        check(self.poly_power > 0.0, format!("poly_power: must be positive, got {}", self.poly_power));
        check(self.total_steps > 0, "total_steps: must be at least 1".into());
        check(self.batch_size > 0, "batch_size: must be at least 1".into());
        check(
            self.keep_fraction > 0.0 && self.keep_fraction <= 1.0,
            format!("keep_fraction: must lie in (0, 1], got {}", self.keep_fraction),
        );
        check(self.tau_init > 0.0 && self.tau_init.is_finite(), format!("tau_init: must be positive, got {}", self.tau_init));
        out
    }
}

/// `lr0 · (1 − step/total)^power`, zero from `total_steps` on.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    cfg.lr0 * (1.0 - step as f64 / cfg.total_steps as f64).powf(cfg.poly_power)
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, model: &mut SegModel, lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        for (name, p) in &params {
            if p.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite { what: "gradient", param: name.clone() });
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        for ((_, p), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = self.momentum * *vi + gi;
            }
            for (x, vi) in p.data_mut().iter_mut().zip(v.iter()) {
                *x -= lr * vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub tau: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        self.loss.csv_row(self.step, self.tau)
    }
}

/// Forward/backward over one batch. Per-tier terms are averaged over the
/// batch's samples of that tier, then summed.
pub fn batch_loss(
    model: &mut SegModel,
    space: &LabelSpace,
    pools: &[Pool],
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (mut hd, mut ld, mut wd) = (Vec::new(), Vec::new(), Vec::new());
    let (mut kept, mut valid) = (0usize, 0usize);
    for &(d, s) in batch {
        let sample = &pools[d].samples[s];
        if !cfg.terms.enabled(sample.tier) {
            continue;
        }
        let x = tape.leaf(&sample.scene.features);
        let map = forward(&mut tape, &bound, x)?;
        match (sample.tier, sample.pixels(), sample.boxes()) {
            (Tier::Hd, Some(sup), _) => hd.push(loss_hd(&mut tape, &map, sup, space, bound.tau)?),
            (Tier::Ld, Some(sup), _) => match cfg.noisy_loss {
                NoisyLoss::Ld => {
                    let (l, k) = loss_ld(&mut tape, &map, sup, space, bound.tau, cfg.keep_fraction)?;
                    kept += k.kept;
                    valid += k.valid;
                    ld.push(l);
                }
                NoisyLoss::Hd => {
                    let l = loss_hd(&mut tape, &map, sup, space, bound.tau)?;
                    let m = sup.valid_count();
                    kept += m;
                    valid += m;
                    ld.push(l);
                }
            },
            (Tier::Wd, _, Some(sup)) => {
                if !sup.is_empty() {
                    wd.push(loss_wd(&mut tape, &bound, &map, sup)?);
                }
            }
            _ => return Err(Error::InvalidArgument(format!("sample {s} of dataset {d} has a payload that does not match its tier"))),
        }
    }
    let terms = LossTerms {
        hd: mean_of(&mut tape, &hd)?,
        ld: mean_of(&mut tape, &ld)?,
        wd: mean_of(&mut tape, &wd)?,
        kept_fraction: (valid > 0).then(|| kept as f64 / valid as f64),
    };
    let (total, breakdown) = total_loss(&mut tape, &terms)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { what: "loss", param: "total".into() });
    }
    tape.backward(total)?;
    model.accumulate_grads(&tape, &bound);
    Ok(breakdown)
}

/// Runs `cfg.total_steps` balanced batches from `model`. Deterministic in
/// `seed` (batching stream). The label space must cover every label id
/// used by pixel supervision.
pub fn train(
    cfg: &TrainConfig,
    mut model: SegModel,
    space: &LabelSpace,
    pools: &[Pool],
    seed: u64,
) -> Result<(SegModel, Vec<StepRecord>)> {
    let problems = cfg.violations("");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let sizes: Vec<usize> = pools.iter().map(|p| p.samples.len()).collect();
    let mut batches = BalancedBatches::new(&sizes, cfg.batch_size, SeedStreams::new(seed).derive("batching"))?;
    let mut sgd = Sgd::new(cfg.momentum);
    let mut records = Vec::with_capacity(cfg.total_steps);
    model.zero_grad();
    for step in 0..cfg.total_steps {
        let batch = batches.next().expect("batch stream is endless");
        let tau = model.tau();
        let loss = batch_loss(&mut model, space, pools, &batch, cfg)?;
        let lr = poly_lr(step, cfg);
        sgd.step(&mut model, lr)?;
        records.push(StepRecord { step, loss, tau, lr });
    }
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn poly_schedule_examples() {
        let cfg = TrainConfig::with_steps(100);
        assert_eq!(poly_lr(0, &cfg), 0.01);
        assert_eq!(poly_lr(100, &cfg), 0.0);
        assert_eq!(poly_lr(150, &cfg), 0.0);
        let linear = TrainConfig { poly_power: 1.0, lr0: 0.2, ..TrainConfig::with_steps(100) };
        assert_abs_diff_eq!(poly_lr(50, &linear), 0.1, epsilon = 1e-15);
        for s in 0..100 {
            assert!(poly_lr(s + 1, &cfg) < poly_lr(s, &cfg));
        }
    }

    fn one_param_model(value: f64, grad: f64) -> SegModel {
        let mut m = SegModel::init(1, &[], 1, 0).unwrap();
        m.zero_grad();
        m.weight_mut(0).data_mut()[0] = value;
        m.weight_mut(0).grad_mut().unwrap()[0] = grad;
        m
    }

    #[test]
    fn vanilla_sgd() {
        let mut m = one_param_model(1.0, 0.5);
        let before = m.clone();
        Sgd::new(0.0).step(&mut m, 0.1).unwrap();
        assert_abs_diff_eq!(m.weight_mut(0).data()[0], 0.95, epsilon = 1e-15);
        assert_eq!(m.weight_mut(0).grad().unwrap()[0], 0.0);
        // everything else had zero gradient
        assert_eq!(m.proj, before.proj);
        assert_eq!(m.log_tau, before.log_tau);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, g) = (0.1, 0.5);
        let mut m = one_param_model(1.0, g);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut m, lr).unwrap();
        let after_one = m.weight_mut(0).data()[0];
        m.weight_mut(0).grad_mut().unwrap()[0] = g;
        sgd.step(&mut m, lr).unwrap();
        let second = after_one - m.weight_mut(0).data()[0];
        assert_abs_diff_eq!(second, lr * (g + 0.9 * g), epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut m = SegModel::init(3, &[4], 2, 1).unwrap();
        let before = m.clone();
        Sgd::new(0.9).step(&mut m, 0.5).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = SegModel::init(2, &[3], 2, 1).unwrap();
        m.bias_mut(1).grad_mut().unwrap()[0] = f64::NAN;
        match Sgd::new(0.9).step(&mut m, 0.1) {
            Err(Error::NonFinite { param, .. }) => assert_eq!(param, "layer1.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_violations_are_all_listed() {
        let cfg = TrainConfig { lr0: -1.0, keep_fraction: 0.0, tau_init: 0.0, ..TrainConfig::with_steps(0) };
        let v = cfg.violations("train.");
        assert_eq!(v.len(), 4, "{v:?}");
        assert!(v.iter().all(|m| m.starts_with("train.")));
    }
}
