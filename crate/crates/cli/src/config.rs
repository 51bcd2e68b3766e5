//! Config loading: defaults, then the file, then `--set` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use crowdcal::study::ExperimentConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Recursively overlay `top` onto `base`. Tables merge, anything else replaces.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parse the right-hand side of `--set` as a TOML value, falling back to a
/// bare string so `--set aggregation.sampling=with_replacement` works.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one piece");
    let mut table = doc;
    for (depth, key) in parents.iter().enumerate() {
        table = match table.get_mut(*key) {
            Some(Value::Table(t)) => t,
            _ => bail!("--set {path}: {} is not a config section", keys[..=depth].join(".")),
        };
    }
    if last.is_empty() {
        bail!("--set {path}: empty key");
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let mut doc = Table::try_from(ExperimentConfig::default()).context("serializing default config")?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut doc, file);
    }
    for s in sets {
        apply_override(&mut doc, s)?;
    }
    let cfg: ExperimentConfig = doc.try_into().context("invalid config")?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).context("serializing config")
}

pub fn hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_toml(cfg)?.as_bytes())))
}
