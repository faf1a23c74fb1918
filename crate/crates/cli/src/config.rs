//! Run configuration: one TOML file with dotted keys (`train.epochs = 30`),
//! every default materialized in the echo written to each run directory.

use std::fmt::Write as _;
use std::path::PathBuf;

use mindalign_core::eval::{EvalConfig, Variant};
use mindalign_core::rng;
use mindalign_core::train::{ConverterConfig, TrainConfig};
use mindalign_core::world::WorldConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory written by `gen-world`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    /// Subject for `finetune`, `scratch`, `eval` and `ablate`.
    pub subject: String,
    pub sessions: usize,
    /// Subjects written by `gen-data`; empty means all.
    pub subjects: Vec<String>,
    pub session_grid: Vec<usize>,
    pub arms: Vec<String>,
    pub n_seeds: usize,
    pub variants: Vec<String>,
    /// Also fit the token-space converter after `pretrain` / `scratch`.
    pub train_converter: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            subject: "s0".into(),
            sessions: 8,
            subjects: Vec::new(),
            session_grid: vec![1, 2, 4, 8],
            arms: vec!["pretrained".into(), "scratch".into()],
            n_seeds: 1,
            variants: Variant::COMPONENTS.iter().map(|v| v.name().to_string()).collect(),
            train_converter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Master seed; `train.seed`, `eval.seed` and `converter.seed` derive
    /// from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub converter: ConverterConfig,
    pub paths: Paths,
    pub run: RunParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            command: None,
            seed: 0,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            converter: ConverterConfig::default(),
            paths: Paths::default(),
            run: RunParams::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

/// Derived seeds keep 63 bits so they fit TOML integers.
fn derive(master: u64, label: &str) -> u64 {
    rng::derive(master, label) >> 1
}

/// Stream seeds derived from the master seed.
pub fn derived_seeds(master: u64) -> [(&'static str, u64); 3] {
    [
        ("train.seed", derive(master, "train")),
        ("eval.seed", derive(master, "eval")),
        ("converter.seed", derive(master, "converter")),
    ]
}

impl RunConfig {
    fn seed_slots(&mut self) -> [&mut u64; 3] {
        [&mut self.train.seed, &mut self.eval.seed, &mut self.converter.seed]
    }

    fn derive_seeds(&mut self) {
        let d = derived_seeds(self.seed);
        for (slot, (_, v)) in self.seed_slots().into_iter().zip(d) {
            *slot = v;
        }
    }

    pub fn world_seed(&self) -> u64 {
        derive(self.seed, "world")
    }

    pub fn data_seed(&self) -> u64 {
        derive(self.seed, "data")
    }

    /// Parses and validates config text. Unknown keys and type errors are
    /// reported with their location.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let d = derived_seeds(cfg.seed);
        for (slot, (key, v)) in cfg.seed_slots().into_iter().zip(d) {
            let (section, _) = key.split_once('.').unwrap();
            let explicit = raw.get(section).and_then(|t| t.get("seed")).is_some();
            if explicit && *slot != 0 && *slot != v {
                return Err(CliError::Config(format!(
                    "{key} is derived from the master seed (expected {v}); set `seed` instead"
                )));
            }
        }
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides (dotted keys, TOML values; bare words
    /// are taken as strings).
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {}", v.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(v.trim().to_string()));
            let mut table = &mut doc;
            let parts: Vec<&str> = k.trim().split('.').collect();
            for part in &parts[..parts.len() - 1] {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::Config(format!("override `{k}`: `{part}` is not a table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        Self::parse(&toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate().map_err(|e| CliError::Config(format!("world: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        let n_test = self.world.n_shared_test;
        if self.eval.pool_size > n_test {
            return Err(CliError::Config(format!(
                "eval.pool_size = {} exceeds the {n_test}-image shared test set; lower eval.pool_size or raise world.n_shared_test",
                self.eval.pool_size
            )));
        }
        if self.eval.pool_size < 2 || self.eval.repetitions == 0 {
            return Err(CliError::Config("eval.pool_size must be >= 2 and eval.repetitions >= 1".into()));
        }
        if self.eval.lowlevel_block == 0 || self.eval.lowlevel_block > self.world.height.min(self.world.width) {
            return Err(CliError::Config("eval.lowlevel_block must fit inside the image".into()));
        }
        if self.run.sessions == 0 || self.run.session_grid.contains(&0) || self.run.n_seeds == 0 {
            return Err(CliError::Config("session counts and run.n_seeds must be >= 1".into()));
        }
        for a in &self.run.arms {
            if a != "pretrained" && a != "scratch" {
                return Err(CliError::Config(format!("unknown arm `{a}` (expected pretrained or scratch)")));
            }
        }
        for v in &self.run.variants {
            v.parse::<Variant>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Flat `a.b.c = value` lines, one per leaf, in a fixed order.
    pub fn echo(&self) -> String {
        let value = Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Table(t) => {
            // Leaves before sub-tables so related keys stay together.
            let (tables, leaves): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in leaves.into_iter().chain(tables) {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => writeln!(out, "{prefix} = {leaf}").unwrap(),
    }
}
