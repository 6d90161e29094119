//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration can be written back out verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mcd::{DiscrepancyKind, TrainConfig};
use crate::optim::AdamConfig;
use crate::synth::DataConfig;

/// `(key, default, description)` for every accepted key, in output order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed of training (model init, batch order, SWD slices)"),
    ("discrepancy", "pemd_plus_swd", "none | pemd | swd | pemd_plus_swd (set by --method)"),
    ("projections", "16", "p-EMD projection angles"),
    ("slices", "128", "SWD slice directions"),
    ("temperature_scale", "0.1", "logit scale before the softmax feeding the discrepancy"),
    ("lambda", "1.0", "discrepancy weight in step 2"),
    ("learning_rate", "0.001", "Adam step size"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator offset"),
    ("batch_size", "64", "pairs per source and per target batch"),
    ("iterations", "500", "outer training iterations"),
    ("step3_repeat", "2", "feature updates per step 3"),
    ("probe_every", "25", "iterations between probe accuracy evaluations"),
    ("probe_size", "64", "held-out source pairs (taken from the end of the train split) for probing"),
    ("data_dir", "", "directory written by gen-data; empty generates data in memory from data_seed"),
    ("data_seed", "0", "seed of in-memory data generation"),
    ("image_count", "9", "source images"),
    ("image_side", "256", "source image side in pixels"),
    ("pairs_per_modality", "5120", "pairs generated per domain"),
    ("train_count", "4096", "leading pairs that form the train split"),
    ("augment", "true", "random affine on the moving window"),
];

/// Parsed and validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe_size: usize,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key} = {value:?} is not a valid value")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?} is not true or false"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_values(BTreeMap::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Parse config text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _, _)| *key == k) {
                return Err(Error::Config(format!("{origin}:{}: unknown key {k:?} (see --help for the list)", n + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("{origin}:{}: key {k:?} given twice", n + 1)));
            }
        }
        Self::from_values(values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Replace one key, re-validating everything.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        self.set_many(&[(key, value)])
    }

    /// Replace several keys at once and validate only the final combination,
    /// so that dependent keys can be changed in any order.
    pub fn set_many(&self, pairs: &[(&str, &str)]) -> Result<Self> {
        let mut values = self.values.clone();
        for &(key, value) in pairs {
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
            values.insert(key.to_string(), value.to_string());
        }
        Self::from_values(values)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d))
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> &str {
            values
                .get(k)
                .map(String::as_str)
                .unwrap_or_else(|| KEYS.iter().find(|(key, _, _)| *key == k).unwrap().1)
        };
        let train = TrainConfig {
            discrepancy: DiscrepancyKind::from_str(get("discrepancy"))?,
            projections: parse("projections", get("projections"))?,
            slices: parse("slices", get("slices"))?,
            temperature_scale: parse("temperature_scale", get("temperature_scale"))?,
            lambda: parse("lambda", get("lambda"))?,
            adam: AdamConfig {
                lr: parse("learning_rate", get("learning_rate"))?,
                beta1: parse("beta1", get("beta1"))?,
                beta2: parse("beta2", get("beta2"))?,
                eps: parse("adam_eps", get("adam_eps"))?,
            },
            batch_size: parse("batch_size", get("batch_size"))?,
            iterations: parse("iterations", get("iterations"))?,
            step3_repeat: parse("step3_repeat", get("step3_repeat"))?,
            seed: parse("seed", get("seed"))?,
            probe_every: parse("probe_every", get("probe_every"))?,
        };
        train.validate()?;
        let data = DataConfig {
            image_count: parse("image_count", get("image_count"))?,
            image_side: parse("image_side", get("image_side"))?,
            pairs_per_modality: parse("pairs_per_modality", get("pairs_per_modality"))?,
            train_count: parse("train_count", get("train_count"))?,
            augment: parse_bool("augment", get("augment"))?,
        };
        data.validate()?;
        let probe_size: usize = parse("probe_size", get("probe_size"))?;
        if probe_size == 0 || probe_size >= data.train_count {
            return Err(Error::Config(format!("probe_size must be in 1..{}, got {probe_size}", data.train_count)));
        }
        let data_dir = match get("data_dir") {
            "" => None,
            d => Some(PathBuf::from(d)),
        };
        let data_seed = parse("data_seed", get("data_seed"))?;
        Ok(RunConfig { values, train, data, probe_size, data_dir, data_seed })
    }

    /// Every key with its effective value, one per line.
    pub fn resolved(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, _, _) in KEYS {
            writeln!(s, "{k} = {}", self.get(k).unwrap()).unwrap();
        }
        s
    }

    /// FNV-1a over the resolved text.
    pub fn digest(&self) -> u64 {
        self.resolved().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// Help text listing every key and its default.
pub fn describe_keys() -> String {
    let mut s = String::from("Config keys (`key = value`, `#` starts a comment):\n");
    for (k, d, help) in KEYS {
        let shown = if d.is_empty() { "\"\"" } else { d };
        writeln!(s, "  {k:<20} default {shown:<14} {help}").unwrap();
    }
    s
}

/// Method names accepted by `train --method` and the settings they imply.
pub const METHODS: [&str; 5] = ["none", "swd", "pemd2", "pemd16", "pemd16+swd"];

pub fn apply_method(config: &RunConfig, method: &str) -> Result<RunConfig> {
    match method {
        "none" => config.set("discrepancy", "none"),
        "swd" => config.set("discrepancy", "swd"),
        "pemd2" => config.set("discrepancy", "pemd")?.set("projections", "2"),
        "pemd16" => config.set("discrepancy", "pemd")?.set("projections", "16"),
        "pemd16+swd" => config.set("discrepancy", "pemd_plus_swd")?.set("projections", "16"),
        _ => Err(Error::Config(format!("unknown method {method:?}, expected one of {}", METHODS.join(", ")))),
    }
}
