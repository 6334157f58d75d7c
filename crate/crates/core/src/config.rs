//! Experiment configuration: TOML files layered over named presets, stable
//! content hashes, and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FormatDescriptor, MarkovConfig, DEFAULT_WINDOW_OPTIONS};
use crate::error::{Error, Result};
use crate::trainer::Recipe;

/// Where interactions come from: a delimited file or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Relative paths are resolved against the data root.
    pub path: Option<PathBuf>,
    pub format: FormatDescriptor,
    pub synthetic: Option<MarkovConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub user_core: usize,
    pub item_core: usize,
    pub window_options: Vec<u32>,
    /// Tail share the chosen window should approximate.
    pub target_fraction: f64,
    /// Skips window selection when set.
    pub window_days: Option<u32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            user_core: 2,
            item_core: 5,
            window_options: DEFAULT_WINDOW_OPTIONS.to_vec(),
            target_fraction: 0.05,
            window_days: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: Vec<usize>,
    pub popular_window_days: u32,
    pub include_popular: bool,
    pub recall_capped: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: vec![10],
            popular_window_days: 7,
            include_popular: true,
            recall_capped: false,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Display name; defaults to the preset name.
    pub name: Option<String>,
    pub preset: Option<String>,
    /// Dataset hyper-parameter profile (`ml20m`, `kion`, `beeradvocate`).
    pub profile: Option<String>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: crate::model::ArchConfig,
    pub objective: crate::objectives::ObjectiveConfig,
    pub negatives: crate::negatives::SamplerConfig,
    pub loss: crate::losses::LossConfig,
    pub train: crate::trainer::TrainConfig,
    pub eval: EvalConfig,
    /// Sweep axes: dotted key → values.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

/// Named component combinations, one per studied model variant.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "sasrec_vanilla",
        r#"
model = { block_style = "postln_sasrec", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "bce" }
negatives = { kind = "uniform", k = 1, logq = false }
"#,
    ),
    (
        "sasrec_ss",
        r#"
model = { block_style = "postln_sasrec", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "esasrec",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "sasrec_ligr_gbce",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "gbce", gbce_t = 0.75 }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "esasrec_mixed",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "mixed", ratio = 0.6, k = 256, logq = false }
"#,
    ),
    (
        "esasrec_mixed_logq",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "mixed", ratio = 0.6, k = 256, logq = true }
"#,
    ),
    (
        "esasrec_inbatch",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "shifted_sequence" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "in_batch", k = 256, logq = false }
"#,
    ),
    (
        "denseaa_ligr_ss",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "dense_all_action" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "allaction_ligr_ss",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "all_action" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "nextaction_ligr_ss",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "next_action" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "bert4rec_ligr_ss",
        r#"
model = { block_style = "ligr", attention = "bidirectional" }
objective = { kind = "mlm" }
loss = { kind = "sampled_softmax" }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
    (
        "denseaa_ligr_gbce",
        r#"
model = { block_style = "ligr", attention = "causal" }
objective = { kind = "dense_all_action" }
loss = { kind = "gbce", gbce_t = 0.75 }
negatives = { kind = "uniform", k = 256, logq = false }
"#,
    ),
];

/// Result-table labels accepted as preset names.
pub const PRESET_ALIASES: &[(&str, &str)] = &[
    ("SASRec Vanilla, BCE 1 neg", "sasrec_vanilla"),
    ("SASRec+SS", "sasrec_ss"),
    ("SASRec+LiGR+SS", "esasrec"),
    ("SASRec+LiGR+SS (eSASRec)", "esasrec"),
    ("eSASRec", "esasrec"),
    ("SASRec+LiGR+gBCE-0.75", "sasrec_ligr_gbce"),
    ("SASRec+LiGR+SS+Mixed-0.6", "esasrec_mixed"),
    ("SASRec+LiGR+SS+Mixed-0.6-LogQ", "esasrec_mixed_logq"),
    ("SASRec+LiGR+SS+InBatch", "esasrec_inbatch"),
    ("DenseAA+LiGR+SS", "denseaa_ligr_ss"),
    ("AllAction-Causal+LiGR+SS", "allaction_ligr_ss"),
    ("NextAction-Causal+LiGR+SS", "nextaction_ligr_ss"),
    ("BERT4Rec+LiGR+SS", "bert4rec_ligr_ss"),
    ("DenseAA+LiGR+gBCE-0.75", "denseaa_ligr_gbce"),
];

/// Per-dataset hyper-parameters of the reference study.
pub const PROFILES: &[(&str, &str)] = &[
    (
        "ml20m",
        r#"
model = { emb_dim = 256, n_blocks = 4, n_heads = 8, dropout_rate = 0.2, ff_emb_mult = 4, max_len = 200 }
negatives = { k = 256 }
train = { max_epochs = 100, patience = 50, learning_rate = 0.001, batch_size = 128 }
"#,
    ),
    (
        "kion",
        r#"
model = { emb_dim = 256, n_blocks = 2, n_heads = 2, dropout_rate = 0.1, ff_emb_mult = 4, max_len = 50 }
negatives = { k = 256 }
train = { max_epochs = 100, patience = 50, learning_rate = 0.001, batch_size = 128 }
"#,
    ),
    (
        "beeradvocate",
        r#"
model = { emb_dim = 256, n_blocks = 4, n_heads = 2, dropout_rate = 0.3, ff_emb_mult = 4, max_len = 100 }
negatives = { k = 256 }
train = { max_epochs = 100, patience = 10, learning_rate = 0.001, batch_size = 128 }
"#,
    ),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Canonical preset name for a name or table label.
pub fn resolve_preset(name: &str) -> Result<&'static str> {
    let canonical = PRESET_ALIASES
        .iter()
        .find(|a| a.0 == name)
        .map_or(name, |a| a.1);
    PRESETS
        .iter()
        .find(|p| p.0 == canonical)
        .map(|p| p.0)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?}; available presets: {}",
                preset_names().join(", ")
            ))
        })
}

fn table_of(name: &str, entries: &[(&str, &str)]) -> toml::Table {
    let text = entries.iter().find(|e| e.0 == name).map(|e| e.1).unwrap_or_default();
    toml::from_str(text).expect("built-in tables parse")
}

/// Recursively merges `over` into `base`; tables merge, everything else
/// is replaced.
pub fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Sets a dotted key (`model.emb_dim`) in a table, creating sub-tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Layers defaults, then the profile, then the preset, then `user`.
    /// `preset_override` wins over a preset named inside `user`.
    pub fn from_table(user: &toml::Table, preset_override: Option<&str>) -> Result<Self> {
        let mut merged = toml::Table::new();
        let profile = user.get("profile").and_then(|v| v.as_str()).map(str::to_string);
        if let Some(p) = &profile {
            if !PROFILES.iter().any(|e| e.0 == p) {
                let names: Vec<&str> = PROFILES.iter().map(|e| e.0).collect();
                return Err(Error::Config(format!("unknown profile {p:?}; available: {}", names.join(", "))));
            }
            merge(&mut merged, &table_of(p, PROFILES));
        }
        let preset = match preset_override {
            Some(p) => Some(p.to_string()),
            None => user.get("preset").and_then(|v| v.as_str()).map(str::to_string),
        };
        let preset = preset.map(|p| resolve_preset(&p)).transpose()?;
        if let Some(p) = preset {
            merge(&mut merged, &table_of(p, PRESETS));
        }
        merge(&mut merged, user);
        if let Some(p) = preset {
            merged.insert("preset".into(), toml::Value::String(p.into()));
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(&table, preset_override)
    }

    pub fn from_file(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, preset_override)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_table(&toml::Table::new(), Some(name))
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe().validate()?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(Error::Config("eval.k needs positive cutoffs".into()));
        }
        if self.split.window_options.is_empty() && self.split.window_days.is_none() {
            return Err(Error::Config("split needs window_options or window_days".into()));
        }
        if self.split.user_core < 1 || self.split.item_core < 1 {
            return Err(Error::Config("core thresholds must be >= 1".into()));
        }
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    pub fn recipe(&self) -> Recipe {
        Recipe {
            model: self.model.clone(),
            objective: self.objective.clone(),
            negatives: self.negatives.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .or_else(|| self.preset.clone())
            .unwrap_or_else(|| "custom".into())
    }

    /// Hash of everything that affects a run's results.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        if let Some(map) = v.as_object_mut() {
            for k in ["name", "grid", "preset", "profile"] {
                map.remove(k);
            }
        }
        json_hash(&v)
    }

    /// Hash of the inputs to data preparation only.
    pub fn data_hash(&self) -> String {
        json_hash(&serde_json::json!({ "dataset": self.dataset, "split": self.split }))
    }

    /// Every combination of the grid axes applied on top of this config,
    /// with the axis values that produced it.
    pub fn expand_grid(&self) -> Result<Vec<(Vec<(String, toml::Value)>, ExperimentConfig)>> {
        if self.grid.is_empty() || self.grid.values().any(Vec::is_empty) {
            return Err(Error::Config("grid has no runs: every axis needs at least one value".into()));
        }
        let base: toml::Table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let axes: Vec<(&String, &Vec<toml::Value>)> = self.grid.iter().collect();
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(((*key).clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|combo| {
                let mut t = base.clone();
                t.remove("grid");
                for (k, v) in &combo {
                    set_dotted(&mut t, k, v.clone())?;
                }
                let cfg: ExperimentConfig = toml::Value::Table(t)
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
                cfg.validate()?;
                Ok((combo, cfg))
            })
            .collect()
    }

    /// Dataset file resolved against `data_root` when relative.
    pub fn dataset_path(&self, data_root: Option<&Path>) -> Option<PathBuf> {
        let p = self.dataset.path.as_ref()?;
        Some(match data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.clone(),
        })
    }
}

/// SHA-256 of the canonical JSON encoding (object keys sorted).
pub fn json_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(&canonicalize(value)).expect("serializable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Record of one training run; every artifact path is relative to the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub split_hash: String,
    pub data_digest: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub complete: bool,
}
