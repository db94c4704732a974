//! Layered settings: built-in defaults, then a flat TOML file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use batkit::model::ModelConfig;
use batkit::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::args::{ModelFlags, TrainFlags};

const MODEL_KEYS: [&str; 6] = [
    "d_model",
    "n_heads",
    "d_ff",
    "n_layers",
    "max_seq_len",
    "init_seed",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub init_seed: Option<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            n_layers: 2,
            max_seq_len: 64,
            init_seed: None,
        }
    }
}

impl ModelSpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig::new(
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.n_layers,
            self.max_seq_len,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a string.
fn parse_set(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

pub struct Layers {
    table: Table,
}

impl Layers {
    pub fn new(flags: &TrainFlags) -> Result<Layers> {
        let mut table = match &flags.config {
            Some(path) => read_table(path)?,
            None => Table::new(),
        };
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                table.insert(k.to_string(), v);
            }
        };
        put("seed", flags.seed.map(|v| Value::Integer(v as i64)));
        put("steps", flags.steps.map(|v| Value::Integer(v as i64)));
        put(
            "batch_size",
            flags.batch_size.map(|v| Value::Integer(v as i64)),
        );
        put("learning_rate", flags.learning_rate.map(Value::Float));
        put("grad_clip_norm", flags.grad_clip_norm.map(Value::Float));
        for s in &flags.set {
            let (k, v) = parse_set(s)?;
            table.insert(k, v);
        }
        Ok(Layers { table })
    }

    pub fn int(&mut self, key: &str, v: Option<usize>) -> &mut Self {
        if let Some(v) = v {
            self.table.insert(key.into(), Value::Integer(v as i64));
        }
        self
    }

    pub fn float(&mut self, key: &str, v: Option<f64>) -> &mut Self {
        if let Some(v) = v {
            self.table.insert(key.into(), Value::Float(v));
        }
        self
    }

    pub fn string(&mut self, key: &str, v: Option<&str>) -> &mut Self {
        if let Some(v) = v {
            self.table.insert(key.into(), Value::String(v.into()));
        }
        self
    }

    pub fn model(&mut self, m: &ModelFlags) -> &mut Self {
        self.int("d_model", m.d_model)
            .int("n_heads", m.n_heads)
            .int("d_ff", m.d_ff)
            .int("n_layers", m.n_layers)
            .int("max_seq_len", m.max_seq_len);
        if let Some(s) = m.init_seed {
            self.table
                .insert("init_seed".into(), Value::Integer(s as i64));
        }
        self
    }

    /// Splits the merged table into model and training settings. Unknown keys
    /// are errors.
    pub fn resolve(&self) -> Result<Settings> {
        let mut model = Table::new();
        let mut train = Table::new();
        for (k, v) in &self.table {
            if MODEL_KEYS.contains(&k.as_str()) {
                model.insert(k.clone(), v.clone());
            } else {
                train.insert(k.clone(), v.clone());
            }
        }
        let model: ModelSpec = Value::Table(model)
            .try_into()
            .context("invalid model settings")?;
        let train: TrainConfig = Value::Table(train)
            .try_into()
            .context("invalid training settings")?;
        train.validate()?;
        Ok(Settings { model, train })
    }

    /// Like [`Layers::resolve`] but refuses model keys, for commands that
    /// start from a checkpoint.
    pub fn resolve_train(&self) -> Result<TrainConfig> {
        if let Some(k) = self.table.keys().find(|k| MODEL_KEYS.contains(&k.as_str())) {
            bail!("{k} cannot be set here: the model shape comes from the checkpoint");
        }
        Ok(self.resolve()?.train)
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        bail!("{}: config must be flat, found section {k:?}", path.display());
    }
    Ok(table)
}
