//! The `embseg` command line.
//!
//! Exit codes: 0 success, 1 verification failure (gradcheck exceedance,
//! replay mismatch), 2 usage/config/I-O error, 3 training abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::Error;
use crate::eval::{evaluate, zero_shot_eval, Evaluation, ZeroShotReport};
use crate::experiment::{build_pools, build_setup, eval_scenes, init_model, train_from, Report, Setup};
use crate::io::{metrics_csv, write_archive, ArtifactHash, ArtifactWriter, RunManifest};
use crate::label_space::{block_similarity_summary, similarity_csv, LabelSpace};
use crate::seg_head::SegModel;
use crate::verify::{run_suite, Suite, DEFAULT_EPS, DEFAULT_TOLERANCE};

/// Overrides `--seed` and the config's seed when set.
pub const SEED_ENV: &str = "EMBSEG_SEED";

/// The 238-label list with placeholder one-hot embeddings.
pub const BUNDLED_LABELS: &str = include_str!("../data/labels_238.jsonl");

#[derive(Debug, Parser)]
#[command(name = "embseg", version, about = "Language-embedding semantic segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label-space analysis and export.
    Labels {
        #[command(subcommand)]
        action: LabelsAction,
    },
    /// Generate the configured sample pools as an archive.
    Synth(RunArgs),
    /// Train, then evaluate on fresh scenes.
    Train(RunArgs),
    /// Evaluate a checkpoint on fresh scenes.
    Eval(EvalArgs),
    /// Train on seen labels (or load a checkpoint) and evaluate with the heldout labels added.
    Zeroshot(ZeroShotArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum LabelsAction {
    /// Write the N×N cosine-similarity CSV.
    Sim {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One block id per line, in label order.
        #[arg(long)]
        blocks: Option<PathBuf>,
    },
    /// Write a label space as JSONL (defaults to the bundled 238-label list).
    Export {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed; EMBSEG_SEED overrides both.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Skip training and evaluate this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// all | ops | head | losses
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Random points per target.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Largest accepted |a−n|/max(1,|a|).
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Defaults to 0; EMBSEG_SEED overrides.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for gradcheck.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the replay here instead of over the recorded output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Abort(String),
    Check(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Abort(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Abort(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn abort(e: Error) -> Failure {
    Failure::Abort(format!("training aborted: {e}"))
}

type Outcome = std::result::Result<(), Failure>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("embseg: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Labels { action } => labels(action, None),
        Command::Synth(a) => {
            let cfg = load_config(&a)?;
            synth(&cfg, &a.out)
        }
        Command::Train(a) => {
            let cfg = load_config(&a)?;
            train(&cfg, &a.out)
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.run)?;
            eval(&cfg, &a.checkpoint, &a.run.out)
        }
        Command::Zeroshot(a) => {
            let cfg = load_config(&a.run)?;
            zeroshot(&cfg, a.checkpoint.as_deref(), &a.run.out)
        }
        Command::Gradcheck(a) => {
            let seed = resolve_seed(a.seed, 0)?;
            gradcheck(&a, seed)
        }
        Command::Replay(a) => replay(&a),
    }
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Environment beats flag beats config.
fn resolve_seed(flag: Option<u64>, config: u64) -> std::result::Result<u64, Failure> {
    Ok(env_seed()?.or(flag).unwrap_or(config))
}

fn load_config(a: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    Ok(cfg)
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    (serde_json::to_string_pretty(v).expect("serializable") + "\n").into_bytes()
}

fn finish(out: &ArtifactWriter, command: &str, seed: u64, config: Value, args: Value, inputs: Vec<ArtifactHash>) -> Outcome {
    let manifest = RunManifest {
        command: command.into(),
        seed,
        config,
        args,
        inputs,
        output_dir: out.root().display().to_string(),
        artifacts: out.artifacts(),
    };
    let path = out.root().join(manifest_name(command));
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn manifest_name(command: &str) -> String {
    match command.strip_prefix("labels ") {
        Some(action) => format!("labels_{action}.manifest.json"),
        None => "manifest.json".into(),
    }
}

fn read_blocks(path: &Path) -> std::result::Result<Vec<usize>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                Failure::from(Error::Parse {
                    line: i + 1,
                    message: format!("block id {l:?} is not an unsigned integer"),
                })
            })
        })
        .collect()
}

/// Splits an output file path into its directory (the artifact root) and
/// file name.
fn split_out(out: &Path) -> std::result::Result<(PathBuf, String), Failure> {
    let name = out
        .file_name()
        .ok_or_else(|| Failure::Usage(format!("--out {} has no file name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((dir, name))
}

fn labels(action: LabelsAction, out_dir: Option<&Path>) -> Outcome {
    match action {
        LabelsAction::Sim { embeddings, out, blocks } => {
            let space = LabelSpace::load(&embeddings)?;
            let (dir, name) = split_out(&out)?;
            let mut w = ArtifactWriter::new(out_dir.map_or(dir, Path::to_path_buf))?;
            w.write(&name, similarity_csv(&space).as_bytes())?;
            let mut inputs = vec![ArtifactHash::of_file(&embeddings)?];
            if let Some(b) = &blocks {
                let ids = read_blocks(b)?;
                let (within, cross) = block_similarity_summary(&space.similarity_matrix(), &ids)?;
                let summary = json!({
                    "labels": space.len(),
                    "blocks": ids.iter().collect::<std::collections::BTreeSet<_>>().len(),
                    "mean_within_block": within,
                    "mean_cross_block": cross,
                });
                println!("mean within-block similarity {within:.6}, mean cross-block similarity {cross:.6}");
                w.write(&format!("{name}.blocks.json"), &json_bytes(&summary))?;
                inputs.push(ArtifactHash::of_file(b)?);
            }
            println!("wrote {0}x{0} similarity matrix to {1}", space.len(), w.root().join(&name).display());
            let args = json!({"embeddings": embeddings, "out": name, "blocks": blocks});
            finish(&w, "labels sim", 0, Value::Null, args, inputs)
        }
        LabelsAction::Export { embeddings, out } => {
            let (space, inputs) = match &embeddings {
                Some(p) => (LabelSpace::load(p)?, vec![ArtifactHash::of_file(p)?]),
                None => (LabelSpace::from_reader(BUNDLED_LABELS.as_bytes())?, Vec::new()),
            };
            let (dir, name) = split_out(&out)?;
            let mut w = ArtifactWriter::new(out_dir.map_or(dir, Path::to_path_buf))?;
            w.write(&name, space.to_jsonl().as_bytes())?;
            println!("exported {} labels ({}-d) to {}", space.len(), space.dim(), w.root().join(&name).display());
            let args = json!({"embeddings": embeddings, "out": name});
            finish(&w, "labels export", 0, Value::Null, args, inputs)
        }
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let setup = build_setup(cfg)?;
    let pools = build_pools(cfg, &setup)?;
    let mut w = ArtifactWriter::new(out)?;
    write_archive(&mut w, &setup.world, &pools)?;
    w.write("config.json", cfg.to_json().as_bytes())?;
    let n: usize = pools.iter().map(|p| p.samples.len()).sum();
    println!("wrote {n} samples from {} datasets to {}", pools.len(), out.display());
    finish(&w, "synth", cfg.seed, config_value(cfg), json!({}), Vec::new())
}

fn save_checkpoint(w: &mut ArtifactWriter, model: &SegModel) -> Outcome {
    let dir = w.root().join("checkpoint");
    model.save(&dir)?;
    w.record_dir("checkpoint")?;
    Ok(())
}

/// Trains from the init stream; errors from the loop itself are aborts.
fn train_outcome(cfg: &RunConfig) -> std::result::Result<crate::experiment::TrainOutcome, Failure> {
    let setup = build_setup(cfg)?;
    let model = init_model(cfg)?;
    train_from(cfg, setup, model).map_err(abort)
}

fn write_training(w: &mut ArtifactWriter, cfg: &RunConfig, outcome: &crate::experiment::TrainOutcome) -> Outcome {
    save_checkpoint(w, &outcome.model)?;
    w.write("metrics.csv", metrics_csv(&outcome.records).as_bytes())?;
    w.write("report.json", Report::new(outcome, cfg).to_json().as_bytes())?;
    w.write("config.json", cfg.to_json().as_bytes())?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Outcome {
    let outcome = train_outcome(cfg)?;
    let mut w = ArtifactWriter::new(out)?;
    write_training(&mut w, cfg, &outcome)?;
    println!("trained {} steps: mIoU {:.4}, tau {:.4}", outcome.records.len(), outcome.evaluation.miou, outcome.model.tau());
    finish(&w, "train", cfg.seed, config_value(cfg), json!({}), Vec::new())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    miou: f64,
    per_class_iou: &'a [Option<f64>],
    zero_shot: Option<&'a ZeroShotReport>,
    config: &'a RunConfig,
}

fn load_model(checkpoint: &Path, setup: &Setup) -> std::result::Result<SegModel, Failure> {
    let model = SegModel::load(checkpoint)?;
    if model.embed_dim() != setup.seen.dim() || model.feature_dim() != setup.world.feature_dim {
        return Err(Failure::Usage(format!(
            "checkpoint maps {}-d features to {}-d embeddings; config needs {} to {}",
            model.feature_dim(),
            model.embed_dim(),
            setup.world.feature_dim,
            setup.seen.dim()
        )));
    }
    Ok(model)
}

fn checkpoint_inputs(checkpoint: &Path) -> std::result::Result<Vec<ArtifactHash>, Failure> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(checkpoint)
        .map_err(|e| Error::io(checkpoint, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    names.iter().map(|p| ArtifactHash::of_file(p).map_err(Failure::from)).collect()
}

fn zero_shot_for(cfg: &RunConfig, setup: &Setup, model: &SegModel) -> crate::Result<Option<ZeroShotReport>> {
    match cfg.zero_shot {
        Some(_) => {
            let scenes = eval_scenes(cfg, setup, &setup.all_ids(), "zero_shot")?;
            zero_shot_eval(model, &setup.seen, &setup.heldout, &scenes).map(Some)
        }
        None => Ok(None),
    }
}

fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Outcome {
    let setup = build_setup(cfg)?;
    let inputs = checkpoint_inputs(checkpoint)?;
    let model = load_model(checkpoint, &setup)?;
    let scenes = eval_scenes(cfg, &setup, &setup.seen_ids(), "eval")?;
    let Evaluation { miou, per_class_iou } = evaluate(&model, &setup.seen, &scenes)?;
    let zero_shot = zero_shot_for(cfg, &setup, &model)?;
    let report = EvalReport {
        miou,
        per_class_iou: &per_class_iou,
        zero_shot: zero_shot.as_ref(),
        config: cfg,
    };
    let mut w = ArtifactWriter::new(out)?;
    w.write("eval.json", &json_bytes(&report))?;
    println!("mIoU {miou:.4} over {} scenes", scenes.len());
    finish(&w, "eval", cfg.seed, config_value(cfg), json!({"checkpoint": checkpoint}), inputs)
}

fn zeroshot(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Outcome {
    if cfg.zero_shot.is_none() {
        return Err(Failure::Usage("invalid config:\n  zero_shot: section is required for the zeroshot command".into()));
    }
    let mut w = ArtifactWriter::new(out)?;
    let (report, inputs) = match checkpoint {
        Some(ckpt) => {
            let setup = build_setup(cfg)?;
            let inputs = checkpoint_inputs(ckpt)?;
            let model = load_model(ckpt, &setup)?;
            (zero_shot_for(cfg, &setup, &model)?.expect("zero_shot section checked"), inputs)
        }
        None => {
            let outcome = train_outcome(cfg)?;
            write_training(&mut w, cfg, &outcome)?;
            (outcome.zero_shot.expect("zero_shot section checked"), Vec::new())
        }
    };
    w.write("zeroshot.json", &json_bytes(&report))?;
    for ((name, id), iou) in report.heldout_names.iter().zip(&report.heldout_ids).zip(&report.heldout_iou) {
        match iou {
            Some(v) => println!("heldout {id:>3} {name}: IoU {v:.4}"),
            None => println!("heldout {id:>3} {name}: absent"),
        }
    }
    match report.heldout_miou {
        Some(m) => println!("heldout mIoU {m:.4}, overall mIoU {:.4}", report.miou),
        None => println!("no heldout label occurred; overall mIoU {:.4}", report.miou),
    }
    let args = json!({"checkpoint": checkpoint});
    finish(&w, "zeroshot", cfg.seed, config_value(cfg), args, inputs)
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Outcome {
    let suite: Suite = a.module.parse()?;
    let results = run_suite(suite, a.trials, a.eps, a.tolerance, seed)?;
    for r in &results {
        println!("{r}");
    }
    if let Some(out) = &a.out {
        let mut w = ArtifactWriter::new(out)?;
        w.write("gradcheck.json", &json_bytes(&results))?;
        let args = json!({"module": a.module, "trials": a.trials, "eps": a.eps, "tolerance": a.tolerance});
        finish(&w, "gradcheck", seed, Value::Null, args, Vec::new())?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.target).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} target(s) exceed relative error {:e} at eps {:e}: {}",
            failed.len(),
            a.tolerance,
            a.eps,
            failed.join(", ")
        )))
    }
}

fn arg_path(args: &Value, key: &str) -> Option<PathBuf> {
    args.get(key).and_then(Value::as_str).map(PathBuf::from)
}

fn replay(a: &ReplayArgs) -> Outcome {
    let m = RunManifest::load(&a.manifest)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&m.output_dir));
    let config = || -> std::result::Result<RunConfig, Failure> {
        let mut cfg = RunConfig::from_value(m.config.clone())?;
        cfg.seed = m.seed;
        Ok(cfg)
    };
    let missing = |key: &str| Failure::Usage(format!("manifest args lack {key:?}"));
    match m.command.as_str() {
        "labels sim" | "labels export" => {
            let name = arg_path(&m.args, "out").ok_or_else(|| missing("out"))?;
            let embeddings = arg_path(&m.args, "embeddings");
            let action = if m.command == "labels sim" {
                LabelsAction::Sim {
                    embeddings: embeddings.ok_or_else(|| missing("embeddings"))?,
                    out: name,
                    blocks: arg_path(&m.args, "blocks"),
                }
            } else {
                LabelsAction::Export { embeddings, out: name }
            };
            labels(action, Some(&out))?;
        }
        "synth" => synth(&config()?, &out)?,
        "train" => train(&config()?, &out)?,
        "eval" => eval(&config()?, &arg_path(&m.args, "checkpoint").ok_or_else(|| missing("checkpoint"))?, &out)?,
        "zeroshot" => zeroshot(&config()?, arg_path(&m.args, "checkpoint").as_deref(), &out)?,
        "gradcheck" => {
            let field = |k: &str| m.args.get(k).cloned().ok_or_else(|| missing(k));
            let g = GradcheckArgs {
                module: serde_json::from_value(field("module")?).map_err(|e| Failure::Usage(e.to_string()))?,
                trials: serde_json::from_value(field("trials")?).map_err(|e| Failure::Usage(e.to_string()))?,
                eps: serde_json::from_value(field("eps")?).map_err(|e| Failure::Usage(e.to_string()))?,
                tolerance: serde_json::from_value(field("tolerance")?).map_err(|e| Failure::Usage(e.to_string()))?,
                seed: Some(m.seed),
                out: Some(out.clone()),
            };
            // Exceedances were part of the recorded run; only outputs matter here.
            match gradcheck(&g, m.seed) {
                Ok(()) | Err(Failure::Check(_)) => {}
                Err(e) => return Err(e),
            }
        }
        other => return Err(Failure::Usage(format!("manifest records unknown command {other:?}"))),
    }
    let replayed = RunManifest::load(out.join(manifest_name(&m.command)))?;
    let mismatched: Vec<&str> = m
        .artifacts
        .iter()
        .filter(|a| !replayed.artifacts.iter().any(|b| b.path == a.path && b.sha256 == a.sha256))
        .map(|a| a.path.as_str())
        .collect();
    if mismatched.is_empty() && replayed.artifacts.len() == m.artifacts.len() {
        println!("replay of {}: {} artifacts byte-identical", m.command, m.artifacts.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("replay of {} differs in: {}", m.command, mismatched.join(", "))))
    }
}
