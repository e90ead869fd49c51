//! Run configuration: one JSON document covering data generation, model,
//! training and evaluation. Unset optional keys are materialized with
//! their defaults so the resolved document fully describes a run.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::synth::DatasetSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_blocks: usize,
    pub per_block: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    #[serde(default = "WorldConfig::default_within_corr")]
    pub within_corr: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl WorldConfig {
    fn default_within_corr() -> f64 {
        0.5
    }

    pub fn labels(&self) -> usize {
        self.n_blocks * self.per_block
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_hidden")]
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    fn default_hidden() -> Vec<usize> {
        vec![32]
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: Self::default_hidden() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "EvalConfig::default_scenes")]
    pub scenes: usize,
    #[serde(default = "EvalConfig::default_side")]
    pub height: usize,
    #[serde(default = "EvalConfig::default_side")]
    pub width: usize,
    #[serde(default = "EvalConfig::default_regions")]
    pub n_regions: usize,
}

impl EvalConfig {
    fn default_scenes() -> usize {
        8
    }
    fn default_side() -> usize {
        12
    }
    fn default_regions() -> usize {
        4
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenes: Self::default_scenes(),
            height: Self::default_side(),
            width: Self::default_side(),
            n_regions: Self::default_regions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    /// Labels withheld from training in every block.
    pub heldout_per_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub world: WorldConfig,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub zero_shot: Option<ZeroShotConfig>,
}

#[derive(Clone, Copy)]
enum Kind {
    Uint,
    Float,
    Bool,
    OneOf(&'static [&'static str]),
    Array(&'static Kind),
    Object(&'static [(&'static str, bool, Kind)]),
}

const TIERS: Kind = Kind::OneOf(&["hd", "ld", "wd"]);

const DATASET: Kind = Kind::Object(&[
    ("tier", true, TIERS),
    ("count", true, Kind::Uint),
    ("height", false, Kind::Uint),
    ("width", false, Kind::Uint),
    ("n_regions", false, Kind::Uint),
    ("corrupt_frac", false, Kind::Float),
    ("teacher_sigma", false, Kind::Float),
]);

const ROOT: Kind = Kind::Object(&[
    ("seed", false, Kind::Uint),
    (
        "world",
        true,
        Kind::Object(&[
            ("n_blocks", true, Kind::Uint),
            ("per_block", true, Kind::Uint),
            ("embed_dim", true, Kind::Uint),
            ("feature_dim", true, Kind::Uint),
            ("within_corr", false, Kind::Float),
            ("noise_sigma", false, Kind::Float),
        ]),
    ),
    ("datasets", true, Kind::Array(&DATASET)),
    ("model", false, Kind::Object(&[("hidden", false, Kind::Array(&Kind::Uint))])),
    (
        "train",
        true,
        Kind::Object(&[
            ("lr0", false, Kind::Float),
            ("momentum", false, Kind::Float),
            ("poly_power", false, Kind::Float),
            ("total_steps", true, Kind::Uint),
            ("batch_size", false, Kind::Uint),
            ("keep_fraction", false, Kind::Float),
            ("tau_init", false, Kind::Float),
            (
                "terms",
                false,
                Kind::Object(&[("hd", false, Kind::Bool), ("ld", false, Kind::Bool), ("wd", false, Kind::Bool)]),
            ),
            ("noisy_loss", false, Kind::OneOf(&["ld", "hd"])),
        ]),
    ),
    (
        "eval",
        false,
        Kind::Object(&[
            ("scenes", false, Kind::Uint),
            ("height", false, Kind::Uint),
            ("width", false, Kind::Uint),
            ("n_regions", false, Kind::Uint),
        ]),
    ),
    ("zero_shot", false, Kind::Object(&[("heldout_per_block", true, Kind::Uint)])),
]);

fn check(value: &Value, kind: Kind, path: &str, errors: &mut Vec<String>) {
    let name = if path.is_empty() { "<root>" } else { path };
    match kind {
        Kind::Uint if !value.is_u64() => errors.push(format!("{name}: expected a non-negative integer, got {value}")),
        Kind::Float if !value.is_number() => errors.push(format!("{name}: expected a number, got {value}")),
        Kind::Bool if !value.is_boolean() => errors.push(format!("{name}: expected true or false, got {value}")),
        Kind::OneOf(options) => {
            if !value.as_str().is_some_and(|s| options.contains(&s)) {
                errors.push(format!("{name}: expected one of {options:?}, got {value}"));
            }
        }
        Kind::Array(inner) => match value.as_array() {
            Some(items) => items
                .iter()
                .enumerate()
                .for_each(|(i, v)| check(v, *inner, &format!("{path}[{i}]"), errors)),
            None => errors.push(format!("{name}: expected an array, got {value}")),
        },
        Kind::Object(fields) => {
            if value.is_null() && !path.is_empty() {
                return;
            }
            let Some(map) = value.as_object() else {
                errors.push(format!("{name}: expected an object"));
                return;
            };
            let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
            for (key, required, sub) in fields {
                match map.get(*key) {
                    Some(v) => check(v, *sub, &join(key), errors),
                    None if *required => errors.push(format!("{}: missing required key", join(key))),
                    None => {}
                }
            }
            for key in map.keys() {
                if !fields.iter().any(|(k, _, _)| k == key) {
                    errors.push(format!("{}: unknown key", join(key)));
                }
            }
        }
        _ => {}
    }
}

impl RunConfig {
    /// Parses and validates, reporting every offending key at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let mut errors = Vec::new();
        check(&value, ROOT, "", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let errors = cfg.violations();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Resolved document with every default materialized.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let w = &self.world;
        if w.n_blocks == 0 || w.per_block == 0 {
            out.push("world: n_blocks and per_block must be at least 1".into());
        }
        if w.embed_dim < w.n_blocks {
            out.push(format!("world.embed_dim: {} is smaller than n_blocks {}", w.embed_dim, w.n_blocks));
        }
        if w.feature_dim == 0 {
            out.push("world.feature_dim: must be at least 1".into());
        }
        if !(0.0..1.0).contains(&w.within_corr) {
            out.push(format!("world.within_corr: must lie in [0, 1), got {}", w.within_corr));
        }
        if !(w.noise_sigma >= 0.0) {
            out.push(format!("world.noise_sigma: must be non-negative, got {}", w.noise_sigma));
        }
        if self.datasets.is_empty() {
            out.push("datasets: at least one dataset is required".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.count == 0 {
                out.push(format!("datasets[{i}].count: must be at least 1"));
            }
            if d.n_regions == 0 || d.n_regions > d.height * d.width {
                out.push(format!("datasets[{i}].n_regions: {} does not fit {}x{}", d.n_regions, d.height, d.width));
            }
            if !(0.0..1.0).contains(&d.corrupt_frac) {
                out.push(format!("datasets[{i}].corrupt_frac: must lie in [0, 1), got {}", d.corrupt_frac));
            }
            if !(d.teacher_sigma >= 0.0) {
                out.push(format!("datasets[{i}].teacher_sigma: must be non-negative, got {}", d.teacher_sigma));
            }
        }
        if self.model.hidden.contains(&0) {
            out.push("model.hidden: widths must be at least 1".into());
        }
        out.extend(self.train.violations("train."));
        if self.train.batch_size < self.datasets.len() {
            out.push(format!(
                "train.batch_size: {} is smaller than the {} datasets",
                self.train.batch_size,
                self.datasets.len()
            ));
        }
        let e = &self.eval;
        if e.scenes == 0 {
            out.push("eval.scenes: must be at least 1".into());
        }
        if e.n_regions == 0 || e.n_regions > e.height * e.width {
            out.push(format!("eval.n_regions: {} does not fit {}x{}", e.n_regions, e.height, e.width));
        }
        if let Some(z) = &self.zero_shot {
            if z.heldout_per_block >= w.per_block {
                out.push(format!(
                    "zero_shot.heldout_per_block: {} leaves no trained label in a block of {}",
                    z.heldout_per_block, w.per_block
                ));
            }
        }
        out
    }
}
