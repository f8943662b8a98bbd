//! Plain-text `key = value` experiment configuration. Unknown keys are
//! rejected so a typo cannot silently change a run.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::JnplConfig;
use crate::model::LrSchedule;
use crate::noise::{NoiseKind, NoiseSpec};
use crate::pipeline::{PseudoConfig, TrainMethod, TrainRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Cifar10,
    Csv,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scale: Scale,
    /// Output directory; overridable by `--out`.
    pub out: Option<String>,
    pub source: DataSource,
    pub classes: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub dim: usize,
    pub separation: f64,
    pub cifar_paths: Vec<String>,
    pub csv_path: Option<String>,
    pub noise: NoiseSpec,
    pub train: TrainRunConfig,
    pub pseudo: PseudoConfig,
    /// Raw text of the config file, copied into run manifests.
    pub raw: String,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "scale",
    "out",
    "dataset.source",
    "dataset.classes",
    "dataset.samples",
    "dataset.test_samples",
    "dataset.dim",
    "dataset.separation",
    "dataset.paths",
    "dataset.csv",
    "noise.kind",
    "noise.rate",
    "noise.map",
    "noise.groups",
    "train.method",
    "train.epochs",
    "train.nlnl_stages",
    "train.batch_size",
    "train.lr",
    "train.decay_factor",
    "train.milestones",
    "train.k_complementary",
    "train.lambda",
    "train.n_exponent",
    "train.hidden",
    "pseudo.epochs",
    "pseudo.milestones",
    "pseudo.lr",
    "pseudo.hard",
];

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}

struct Kv(BTreeMap<String, String>);

impl Kv {
    fn required(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn optional(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.optional(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {s:?}")))
        })
        .collect()
}

fn parse_noise(kv: &Kv, num_classes: usize) -> Result<NoiseSpec> {
    let kind = match kv.optional("noise.kind").unwrap_or("none") {
        "symmetric" => NoiseKind::Symmetric,
        "asymmetric_map" => NoiseKind::AsymmetricMap,
        "circular_groups" => NoiseKind::CircularGroups,
        "none" => NoiseKind::None,
        other => return Err(Error::Config(format!("unknown noise.kind {other:?}"))),
    };
    let rate: f64 = kv.parse("noise.rate", 0.0)?;
    let map = match kv.optional("noise.map") {
        Some(v) => {
            let mut map = BTreeMap::new();
            for pair in v.split(',') {
                let (src, dst) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad noise.map entry {pair:?}")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad noise.map class {s:?}")))
                };
                map.insert(parse(src)?, parse(dst)?);
            }
            Some(map)
        }
        None => None,
    };
    let groups = match kv.optional("noise.groups") {
        Some(v) => Some(
            v.split(';')
                .map(|g| parse_list::<usize>("noise.groups", g))
                .collect::<Result<Vec<Vec<usize>>>>()?,
        ),
        None => None,
    };
    let spec = NoiseSpec { kind, rate, map, groups };
    spec.validate(num_classes).map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

/// Parse and resolve a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    resolve_config(&raw)
}

pub fn resolve_config(raw: &str) -> Result<ExperimentConfig> {
    let kv = Kv(parse_kv(raw)?);
    let seed: u64 = kv.parse("seed", 17)?;
    let scale = match kv.optional("scale").unwrap_or("desk") {
        "desk" => Scale::Desk,
        "paper" => Scale::Paper,
        other => return Err(Error::Config(format!("unknown scale {other:?}"))),
    };
    let source = match kv.optional("dataset.source").unwrap_or("blobs") {
        "blobs" => DataSource::Blobs,
        "cifar10" => DataSource::Cifar10,
        "csv" => DataSource::Csv,
        other => return Err(Error::Config(format!("unknown dataset.source {other:?}"))),
    };
    let classes: usize = kv.parse("dataset.classes", 4)?;
    if classes < 2 {
        return Err(Error::Config("dataset.classes must be >= 2".into()));
    }
    let samples: usize = kv.parse("dataset.samples", 4000)?;
    let test_samples: usize = kv.parse("dataset.test_samples", 1000)?;
    let dim: usize = kv.parse("dataset.dim", 8)?;
    let separation: f64 = kv.parse("dataset.separation", 6.0)?;
    let cifar_paths = match kv.optional("dataset.paths") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => Vec::new(),
    };
    if source == DataSource::Cifar10 && cifar_paths.is_empty() {
        return Err(Error::Config("missing required key \"dataset.paths\"".into()));
    }
    let csv_path = kv.optional("dataset.csv").map(str::to_string);
    if source == DataSource::Csv && csv_path.is_none() {
        return Err(Error::Config("missing required key \"dataset.csv\"".into()));
    }

    let noise = parse_noise(&kv, if source == DataSource::Cifar10 { 10 } else { classes })?;

    let method = match kv.required("train.method")? {
        "jnpl" => TrainMethod::Jnpl,
        "nlnl" => TrainMethod::Nlnl,
        "pl" | "pl_baseline" => TrainMethod::PlBaseline,
        other => return Err(Error::Config(format!("unknown train.method {other:?}"))),
    };
    let mut train = match scale {
        Scale::Desk => TrainRunConfig::desk(method, seed),
        Scale::Paper => TrainRunConfig::paper_scale(method, seed),
    };
    train.epochs = kv.parse("train.epochs", train.epochs)?;
    if let Some(v) = kv.optional("train.nlnl_stages") {
        let stages = parse_list::<usize>("train.nlnl_stages", v)?;
        if stages.len() != 3 {
            return Err(Error::Config("train.nlnl_stages needs exactly 3 values".into()));
        }
        train.nlnl_stages = [stages[0], stages[1], stages[2]];
    }
    train.batch_size = kv.parse("train.batch_size", train.batch_size)?;
    let lr: f64 = kv.parse("train.lr", train.schedule.initial)?;
    let decay: f64 = kv.parse("train.decay_factor", train.schedule.decay_factor)?;
    let milestones = match kv.optional("train.milestones") {
        Some(v) if v.is_empty() => Vec::new(),
        Some(v) => parse_list("train.milestones", v)?,
        None => train.schedule.milestones.clone(),
    };
    train.schedule =
        LrSchedule::new(lr, decay, milestones).map_err(|e| Error::Config(e.to_string()))?;
    train.k_complementary = kv.parse("train.k_complementary", train.k_complementary)?;
    train.jnpl = JnplConfig {
        lambda: kv.parse("train.lambda", train.jnpl.lambda)?,
        n_exponent: kv.parse("train.n_exponent", train.jnpl.n_exponent)?,
    };
    if let Some(v) = kv.optional("train.hidden") {
        train.hidden = parse_list("train.hidden", v)?;
    }
    train.seed = seed;
    train.validate().map_err(|e| Error::Config(e.to_string()))?;

    let mut pseudo = match scale {
        Scale::Desk => PseudoConfig::desk(seed.wrapping_add(1)),
        Scale::Paper => PseudoConfig::paper_scale(seed.wrapping_add(1)),
    };
    pseudo.epochs = kv.parse("pseudo.epochs", pseudo.epochs)?;
    let plr: f64 = kv.parse("pseudo.lr", pseudo.schedule.initial)?;
    let pmilestones = match kv.optional("pseudo.milestones") {
        Some(v) if v.is_empty() => Vec::new(),
        Some(v) => parse_list("pseudo.milestones", v)?,
        None => pseudo.schedule.milestones.clone(),
    };
    pseudo.schedule = LrSchedule::new(plr, pseudo.schedule.decay_factor, pmilestones)
        .map_err(|e| Error::Config(e.to_string()))?;
    pseudo.hard_targets = kv.parse("pseudo.hard", pseudo.hard_targets)?;
    pseudo.hidden = train.hidden.clone();
    pseudo.batch_size = train.batch_size;

    Ok(ExperimentConfig {
        seed,
        scale,
        out: kv.optional("out").map(str::to_string),
        source,
        classes,
        samples,
        test_samples,
        dim,
        separation,
        cifar_paths,
        csv_path,
        noise,
        train,
        pseudo,
        raw: raw.to_string(),
    })
}
