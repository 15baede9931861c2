//! Pipeline configuration: a TOML file of `key = value` lines grouped in
//! sections, with every field optional and unknown keys rejected.
//!
//! Precedence, lowest to highest: built-in defaults, the file, then
//! `section.key=value` overrides (the command line's `--set`, `--seed` and
//! `--out` flags).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::int8::RequantMode;
use crate::model::{ArchSpec, BlockSpec, DEFAULT_BN_EPSILON};
use crate::seed;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub holdout: usize,
    pub noise: f32,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenSpec::default();
        Self {
            classes: g.classes,
            image_size: g.image_size,
            train: g.train,
            val: g.val,
            holdout: g.holdout,
            noise: g.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// `[channels, stride]` per separable block.
    pub blocks: Vec<[usize; 2]>,
    pub bn_epsilon: f32,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchSpec::default();
        Self {
            stem_channels: a.stem_channels,
            stem_stride: a.stem_stride,
            blocks: a.blocks.iter().map(|b| [b.channels, b.stride]).collect(),
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub bn_momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            bn_momentum: t.bn_momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub per_class: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self { per_class: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeSection {
    pub mode: RequantMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectSection {
    pub layer: usize,
    pub channels: Vec<usize>,
}

impl Default for InjectSection {
    fn default() -> Self {
        Self {
            layer: 1,
            channels: vec![0, 3, 7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub probe_per_class: usize,
    pub threshold_db: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            probe_per_class: 8,
            threshold_db: crate::diagnostics::DEFAULT_SQNR_THRESHOLD_DB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub budget_ms: f64,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            budget_ms: crate::bench::DEFAULT_BUDGET_MS,
            warmup: crate::bench::DEFAULT_WARMUP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub calibrate: CalibrateSection,
    pub quantize: QuantizeSection,
    pub inject: InjectSection,
    pub diagnose: DiagnoseSection,
    pub bench: BenchSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("qfsep-out"),
            data: DataSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            calibrate: CalibrateSection::default(),
            quantize: QuantizeSection::default(),
            inject: InjectSection::default(),
            diagnose: DiagnoseSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn line_of(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn config_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

impl PipelineConfig {
    /// Parses configuration text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(path, line_of(text, &e), e.message()))
    }

    /// Layers configuration text over `self`: keys the text sets win, the
    /// rest keep their current values.
    pub fn merge_text(&mut self, text: &str, path: &Path) -> Result<()> {
        Self::parse(text, path)?;
        let file: toml::Table =
            toml::from_str(text).map_err(|e| config_err(path, line_of(text, &e), e.message()))?;
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Invariant(e.to_string()))?;
        merge_tables(&mut root, file);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| config_err(path, 0, e.message()))?;
        Ok(())
    }

    /// Applies one `section.key=value` override. Values use TOML syntax;
    /// anything that does not parse as a TOML value is taken as a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let origin = Path::new("<override>");
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(origin, 0, format!("`{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().filter(|k| !k.is_empty());
        let leaf = leaf.ok_or_else(|| config_err(origin, 0, format!("empty key in `{assignment}`")))?;
        let mut table = &mut root;
        for p in parts {
            table = match table.get_mut(p) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(config_err(origin, 0, format!("unknown section `{p}` in `{key}`"))),
            };
        }
        if !table.contains_key(leaf) {
            return Err(config_err(origin, 0, format!("unknown key `{key}`")));
        }
        table.insert(leaf.to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| config_err(origin, 0, format!("`{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn gen_spec(&self) -> GenSpec {
        let d = &self.data;
        GenSpec {
            seed: seed::derive(self.seed, "data"),
            classes: d.classes,
            image_size: d.image_size,
            train: d.train,
            val: d.val,
            holdout: d.holdout,
            noise: d.noise,
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            input_size: self.data.image_size,
            input_channels: 1,
            classes: self.data.classes,
            stem_channels: self.arch.stem_channels,
            stem_stride: self.arch.stem_stride,
            blocks: self
                .arch
                .blocks
                .iter()
                .map(|&[channels, stride]| BlockSpec { channels, stride })
                .collect(),
            bn_epsilon: self.arch.bn_epsilon,
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            seed: seed::derive(self.seed, "shuffle"),
            bn_momentum: t.bn_momentum,
        }
    }

    /// Semantic checks that need no artifacts.
    pub fn validate(&self) -> Result<()> {
        let gen = self.gen_spec();
        gen.validate()?;
        crate::model::build_baseline_mini(&self.arch_spec())?;
        self.train_config().validate(gen.train)?;
        let min_class = gen.train / gen.classes;
        if self.calibrate.per_class == 0 || self.calibrate.per_class > min_class {
            return Err(Error::InvalidArgument(format!(
                "calibrate.per_class must lie in 1..={min_class}"
            )));
        }
        if self.diagnose.probe_per_class == 0 || self.diagnose.probe_per_class > gen.val / gen.classes {
            return Err(Error::InvalidArgument(
                "diagnose.probe_per_class out of range".into(),
            ));
        }
        if !(self.bench.budget_ms.is_finite() && self.bench.budget_ms > 0.0) {
            return Err(Error::InvalidArgument("bench.budget_ms must be positive".into()));
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "out_dir {} exists and is not a directory",
                self.out_dir.display()
            )));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads, parses and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = PipelineConfig::parse(&text, path)?;
    cfg.validate()?;
    Ok(cfg)
}
