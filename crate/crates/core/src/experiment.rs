//! End-to-end runs driven by a [`RunConfig`]: world and pools from the
//! data stream, model from the init stream, batches from the batching
//! stream.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{evaluate, zero_shot_eval, Evaluation, ZeroShotReport};
use crate::label_space::{LabelRecord, LabelSpace};
use crate::seed::SeedStreams;
use crate::seg_head::SegModel;
use crate::synth::{gen_scene, generate_pool, make_embeddings, Pool, Scene, SynthWorld};
use crate::train::{train, StepRecord};

/// World plus the split into trained and withheld labels. Withheld labels
/// occupy the highest ids, so the trained space is a prefix of the full one.
#[derive(Debug, Clone)]
pub struct Setup {
    pub world: SynthWorld,
    pub seen: LabelSpace,
    pub heldout: Vec<LabelRecord>,
}

impl Setup {
    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.seen.len()).collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.world.space.len()).collect()
    }
}

pub fn build_setup(cfg: &RunConfig) -> Result<Setup> {
    let data = SeedStreams::new(cfg.seed).child("data");
    let w = &cfg.world;
    let (space, blocks) = make_embeddings(w.n_blocks, w.per_block, w.embed_dim, w.within_corr, data.derive("embeddings"))?;
    let holdout = cfg.zero_shot.as_ref().map_or(0, |z| z.heldout_per_block);
    // The last `holdout` labels of each block are withheld.
    let is_heldout = |i: usize| i % w.per_block >= w.per_block - holdout;
    let order: Vec<usize> = (0..space.len()).filter(|&i| !is_heldout(i)).chain((0..space.len()).filter(|&i| is_heldout(i))).collect();
    let records: Vec<LabelRecord> = order.iter().map(|&i| space.record(i).clone()).collect();
    let blocks: Vec<usize> = order.iter().map(|&i| blocks[i]).collect();
    let n_seen = space.len() - holdout * w.n_blocks;
    let full = LabelSpace::new(records.clone())?;
    let seen = LabelSpace::new(records[..n_seen].to_vec())?;
    let heldout = full.records()[n_seen..].to_vec();
    let world = SynthWorld::new(full, blocks, w.feature_dim, w.noise_sigma, data.derive("feature_map"))?;
    Ok(Setup { world, seen, heldout })
}

pub fn build_pools(cfg: &RunConfig, setup: &Setup) -> Result<Vec<Pool>> {
    let seed = SeedStreams::new(cfg.seed).child("data").derive("pools");
    let active = setup.seen_ids();
    cfg.datasets
        .iter()
        .enumerate()
        .map(|(d, spec)| generate_pool(&setup.world, spec, d, &active, seed))
        .collect()
}

/// Fresh scenes from their own stream, never used for training.
pub fn eval_scenes(cfg: &RunConfig, setup: &Setup, active: &[usize], stream: &str) -> Result<Vec<Scene>> {
    let streams = SeedStreams::new(cfg.seed).child("data").child(stream);
    let e = &cfg.eval;
    (0..e.scenes)
        .map(|i| gen_scene(&setup.world, e.height, e.width, e.n_regions, active, streams.derive(&format!("scene{i}"))))
        .collect()
}

pub fn init_model(cfg: &RunConfig) -> Result<SegModel> {
    SegModel::init(
        cfg.world.feature_dim,
        &cfg.model.hidden,
        cfg.world.embed_dim,
        SeedStreams::new(cfg.seed).derive("init"),
    )?
    .with_tau(cfg.train.tau_init)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub setup: Setup,
    pub model: SegModel,
    pub records: Vec<StepRecord>,
    pub evaluation: Evaluation,
    pub zero_shot: Option<ZeroShotReport>,
}

impl TrainOutcome {
    /// Mean of a per-step value over the last `window` steps.
    pub fn tail_mean(&self, window: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        tail.iter().map(f).sum::<f64>() / tail.len() as f64
    }
}

/// Trains from a given starting model on the configured pools.
pub fn train_from(cfg: &RunConfig, setup: Setup, model: SegModel) -> Result<TrainOutcome> {
    let pools = build_pools(cfg, &setup)?;
    let (model, records) = train(&cfg.train, model, &setup.seen, &pools, SeedStreams::new(cfg.seed).derive("batching"))?;
    let scenes = eval_scenes(cfg, &setup, &setup.seen_ids(), "eval")?;
    let evaluation = evaluate(&model, &setup.seen, &scenes)?;
    let zero_shot = match &cfg.zero_shot {
        Some(_) => {
            let scenes = eval_scenes(cfg, &setup, &setup.all_ids(), "zero_shot")?;
            Some(zero_shot_eval(&model, &setup.seen, &setup.heldout, &scenes)?)
        }
        None => None,
    };
    Ok(TrainOutcome {
        setup,
        model,
        records,
        evaluation,
        zero_shot,
    })
}

pub fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let setup = build_setup(cfg)?;
    let model = init_model(cfg)?;
    train_from(cfg, setup, model)
}

/// The JSON report written next to the metrics CSV.
#[derive(Debug, Clone, Serialize)]
pub struct Report<'a> {
    pub miou: f64,
    pub per_class_iou: &'a [Option<f64>],
    pub zero_shot: Option<&'a ZeroShotReport>,
    pub final_tau: f64,
    pub config: &'a RunConfig,
}

impl<'a> Report<'a> {
    pub fn new(outcome: &'a TrainOutcome, cfg: &'a RunConfig) -> Self {
        Report {
            miou: outcome.evaluation.miou,
            per_class_iou: &outcome.evaluation.per_class_iou,
            zero_shot: outcome.zero_shot.as_ref(),
            final_tau: outcome.model.tau(),
            config: cfg,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
