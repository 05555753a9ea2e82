//! Run configuration: one TOML document with dotted `--set` overrides.
//!
//! Training settings live at the top level; `dose`, `phantom`, `data` and
//! `evaluation` are sub-tables. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use alden_core::data::{DoseSimConfig, Window};
use alden_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomOptions {
    pub count: usize,
    pub size: usize,
    pub num_structures: usize,
    pub seed: u64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            count: 40,
            size: 64,
            num_structures: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Paired manifest used by `train`.
    pub train_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationOptions {
    /// Overrides the training window when scoring.
    pub window: Option<Window>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dose: DoseSimConfig,
    pub phantom: PhantomOptions,
    pub data: DataOptions,
    pub evaluation: EvaluationOptions,
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut Table, key: &str) -> Result<T, CliError> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[{key}] {}", e.message()))),
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config serializes to a TOML table")
}

impl RunConfig {
    pub fn from_table(mut table: Table) -> Result<Self, CliError> {
        let dose = section(&mut table, "dose")?;
        let phantom = section(&mut table, "phantom")?;
        let data = section(&mut table, "data")?;
        let evaluation = section(&mut table, "evaluation")?;
        let train = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        Ok(Self {
            train,
            dose,
            phantom,
            data,
            evaluation,
        })
    }

    pub fn to_table(&self) -> Table {
        let mut t = to_table(&self.train);
        t.insert("dose".into(), Value::Table(to_table(&self.dose)));
        t.insert("phantom".into(), Value::Table(to_table(&self.phantom)));
        t.insert("data".into(), Value::Table(to_table(&self.data)));
        t.insert("evaluation".into(), Value::Table(to_table(&self.evaluation)));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }

    /// Defaults, then `path`, then each `key=value` override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = Self::default().to_table();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            let file: Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Recursive table merge; scalars and arrays in `src` replace `dst`.
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

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string (`--set backbone.kind=tiny-test`).
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = match toml::from_str::<Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override `{key}`: `{seg}` is not a table"))),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
