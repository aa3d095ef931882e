//! Effective configuration: preset defaults, then the TOML file, then
//! `--set key=value` overrides, then dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use multiblade::corpus::{SyntheticSpec, DEFAULT_MAX_LEN};
use multiblade::model::Architecture;
use multiblade::pipeline::{EvalConfig, ModelConfig, PipelineConfig, VocabConfig};
use multiblade::train::TrainConfig;
use multiblade_service::ServiceConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding train.tsv, dev.tsv, test.tsv and descriptions.tsv.
    pub dir: PathBuf,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Directory for every artifact of a run.
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub serve: ServiceConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig::from_pipeline(PipelineConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 4 widths, 3100 filters, Adadelta; sized for 50-label corpora.
    #[default]
    Top50,
    /// 6200 filters, Adam with warmup, top-1000 label restriction.
    FullSet,
    /// Small model and short schedules for the synthetic corpus.
    Synthetic,
}

impl CliConfig {
    fn from_pipeline(p: PipelineConfig) -> Self {
        CliConfig {
            run_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: SyntheticSpec::default(),
            vocab: p.vocab,
            model: p.model,
            base: p.base,
            finetune: p.finetune,
            eval: p.eval,
            serve: ServiceConfig::default(),
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Top50 => CliConfig::default(),
            Preset::FullSet => CliConfig::from_pipeline(PipelineConfig {
                model: ModelConfig {
                    architecture: Architecture::full_set(),
                    ..ModelConfig::default()
                },
                base: TrainConfig::base_full_set(),
                finetune: TrainConfig::finetune_full_set(),
                eval: EvalConfig {
                    precision_at: vec![8, 15],
                    ..EvalConfig::default()
                },
                ..PipelineConfig::default()
            }),
            Preset::Synthetic => CliConfig {
                data: DataConfig {
                    dir: PathBuf::from("data/synthetic"),
                    ..DataConfig::default()
                },
                run_dir: PathBuf::from("run/synthetic"),
                ..CliConfig::from_pipeline(PipelineConfig::synthetic())
            },
        }
    }

    /// Preset defaults overlaid with `file`, then with `overrides`.
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(CliConfig::preset(preset)).context("serializing preset")?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, user);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: CliConfig = Value::Table(table).try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Recursive merge: tables merge key by key, anything else replaces.
fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`, where value is a TOML literal or else a bare string.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {spec:?} has an empty key");
    }
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {spec:?}: {k} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
