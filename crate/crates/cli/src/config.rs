//! Run configuration: one JSON file covering data generation, model shape,
//! training, and attribution, with dotted-key command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctformer::attribution::AttributionConfig;
use ctformer::data::SyntheticConfig;
use ctformer::model::ModelConfig;
use ctformer::train::TrainConfig;

/// Everything a run needs. Sections may be omitted (defaults apply); unknown
/// keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    /// Parent directory for run directories when --out is not given.
    pub out_root: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.model.n_features != self.data.n_features {
            bail!(
                "model.n_features {} disagrees with data.n_features {}",
                self.model.n_features,
                self.data.n_features
            );
        }
        if self.model.t_max != self.data.t_max {
            bail!(
                "model.t_max {} disagrees with data.t_max {}",
                self.model.t_max,
                self.data.t_max
            );
        }
        if self.model.cfc_layers == 0 {
            bail!("model.cfc_layers must be at least 1");
        }
        Ok(())
    }
}

fn default_out_root() -> String {
    "runs".to_string()
}

/// Loads the config file (or defaults), applies `key=value` overrides, and
/// validates the result. The sparsity weight lives in the training section;
/// the model section mirrors it so checkpoints are self-describing.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut base = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let cfg: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            cfg
        }
        None => RunConfig::default(),
    };
    if base.out_root.is_empty() {
        base.out_root = default_out_root();
    }
    let mut value = serde_json::to_value(&base).expect("config serializes");
    for set in sets {
        apply_override(&mut value, set)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).context("applying --set overrides")?;
    cfg.model.lambda = cfg.train.lambda;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets one `dotted.key=value` path in the canonical config tree. Keys that
/// do not already exist are unknown and rejected.
fn apply_override(root: &mut Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .with_context(|| format!("override `{set}` is not KEY=VALUE"))?;
    let mut cursor = &mut *root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .with_context(|| format!("config key `{}` is not a section", segments[..i].join(".")))?;
        cursor = map
            .get_mut(*seg)
            .with_context(|| format!("unknown config key `{}`", segments[..=i].join(".")))?;
    }
    // Values parse as JSON when they can (numbers, booleans) and fall back to
    // plain strings (e.g. variant names).
    *cursor = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Echoes the effective configuration into a run directory.
pub fn write_effective_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join("config.json"), text + "\n")
        .with_context(|| format!("writing {}", dir.join("config.json").display()))?;
    Ok(())
}
