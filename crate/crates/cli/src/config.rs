//! Experiment configuration: one TOML document describing a full run.
//!
//! Every field has a default; an empty file is the desk benchmark with the
//! full LAE pipeline on adapters.

use std::fmt;
use std::path::{Path, PathBuf};

use lae_core::bench::{Ablation, Seeds, SplitSpec, SyntheticSpec};
use lae_core::continual::TrainConfig;
use lae_core::model::{BackboneConfig, PretrainConfig};
use lae_core::pet::PetConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Lae,
    Naive,
    Seqft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lae => "lae",
            Method::Naive => "naive",
            Method::Seqft => "seqft",
        }
    }
}

/// The three named seeds; every random draw in a run derives from them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Backbone init, PET init, head growth and batch order.
    pub model: u64,
    /// Dataset and pretext generation.
    pub data: u64,
    /// One run per class-order seed.
    pub class_order: Vec<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { model: 0, data: 0, class_order: vec![0, 1, 2] }
    }
}

impl SeedConfig {
    pub fn for_class_order(&self, class_order: u64) -> Seeds {
        Seeds { model: self.model, data: self.data, class_order }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { num_tasks: s.num_tasks, classes_per_task: s.classes_per_task }
    }
}

impl SplitConfig {
    pub fn spec(&self, class_order_seed: u64) -> SplitSpec {
        SplitSpec { num_tasks: self.num_tasks, classes_per_task: self.classes_per_task, class_order_seed }
    }
}

/// Default pretext set: ten classes whose keys cannot collide with the
/// continual classes.
pub fn default_pretext() -> SyntheticSpec {
    SyntheticSpec { num_classes: 10, key_offset: 1000, ..SyntheticSpec::default() }
}

fn pretext_over_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> Result<SyntheticSpec, D::Error> {
    use serde::de::Error;
    let patch = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(default_pretext()).map_err(D::Error::custom)?;
    table.extend(patch);
    table.try_into().map_err(D::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub output_dir: PathBuf,
    pub seeds: SeedConfig,
    pub backbone: BackboneConfig,
    /// Missing keys fall back to [`default_pretext`], not to the continual
    /// data defaults, so a partial table never collides with the data keys.
    #[serde(deserialize_with = "pretext_over_defaults")]
    pub pretext: SyntheticSpec,
    pub pretrain: PretrainConfig,
    pub data: SyntheticSpec,
    pub split: SplitConfig,
    pub pet: PetConfig,
    pub train: TrainConfig,
    /// Only read by `method = "lae"`; the naive method runs with every switch
    /// off.
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Lae,
            output_dir: PathBuf::from("runs/desk"),
            seeds: SeedConfig::default(),
            backbone: BackboneConfig::default(),
            pretext: default_pretext(),
            pretrain: PretrainConfig::default(),
            data: SyntheticSpec::default(),
            split: SplitConfig::default(),
            pet: PetConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::FULL,
        }
    }
}

/// A configuration problem pinned to the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .map(|s| locate_key(text, s.start))
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "config".to_string());
            err(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// The ablation switches this configuration actually runs with.
    pub fn effective_ablation(&self) -> Ablation {
        match self.method {
            Method::Naive => Ablation::NONE,
            _ => self.ablation,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sub = |field: &str, r: lae_core::Result<()>| r.map_err(|e| err(field, strip(&e.to_string())));
        sub("backbone", self.backbone.validate())?;
        sub("data", self.data.validate())?;
        sub("pretext", self.pretext.validate())?;
        sub("train", self.train.validate())?;

        for (field, seed) in [("backbone.seed", self.backbone.seed), ("data.seed", self.data.seed), ("pretext.seed", self.pretext.seed)] {
            if seed != 0 {
                return Err(err(field, "leave unset; seeds.model and seeds.data govern all randomness"));
            }
        }
        if self.train.seed != 0 {
            return Err(err("train.seed", "leave unset; seeds.model governs training randomness"));
        }
        if !self.train.accumulate {
            return Err(err("train.accumulate", "leave unset; switch accumulation with ablation.acc"));
        }
        if self.seeds.class_order.is_empty() {
            return Err(err("seeds.class_order", "needs at least one seed"));
        }
        let mut sorted = self.seeds.class_order.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("seeds.class_order", "seeds must be distinct"));
        }

        for (name, spec) in [("data", &self.data), ("pretext", &self.pretext)] {
            if spec.patch_tokens != self.backbone.patch_tokens {
                return Err(err(
                    &format!("{name}.patch_tokens"),
                    format!("{} does not match backbone.patch_tokens = {}", spec.patch_tokens, self.backbone.patch_tokens),
                ));
            }
            if spec.token_dim != self.backbone.token_dim {
                return Err(err(
                    &format!("{name}.token_dim"),
                    format!("{} does not match backbone.token_dim = {}", spec.token_dim, self.backbone.token_dim),
                ));
            }
        }
        let data_keys = self.data.class_keys();
        if self.pretext.class_keys().iter().any(|k| data_keys.contains(k)) {
            return Err(err("pretext.key_offset", "pretext classes overlap the continual classes"));
        }

        if self.split.num_tasks == 0 || self.split.classes_per_task == 0 {
            return Err(err("split", "needs at least one task and one class per task"));
        }
        if self.split.num_tasks * self.split.classes_per_task > self.data.num_classes {
            return Err(err(
                "split",
                format!(
                    "{} tasks x {} classes exceed data.num_classes = {}",
                    self.split.num_tasks, self.split.classes_per_task, self.data.num_classes
                ),
            ));
        }

        if self.pet.size == 0 {
            return Err(err("pet.size", "must be at least 1"));
        }
        sub("pet", self.pet.attachment_plan(self.backbone.depth).map(|_| ()))?;

        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return Err(err("pretrain", "epochs and batch_size must be at least 1"));
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(err("pretrain.lr", "must be positive"));
        }

        if self.method == Method::Naive && self.ablation != Ablation::FULL && self.ablation != Ablation::NONE {
            return Err(err("ablation", "the naive method fixes every switch off; use method = \"lae\" for partial ablations"));
        }
        Ok(())
    }

    /// Applies `--ablate k=v,...` overrides (`lea`, `acc`, `ens`; `on`/`off`).
    pub fn apply_ablate(&mut self, spec: &str) -> Result<(), ConfigError> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| err("--ablate", format!("`{item}` is not key=value")))?;
            let on = match v.trim() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => return Err(err(&format!("ablation.{}", k.trim()), format!("`{other}` is not on/off"))),
            };
            match k.trim() {
                "lea" => self.ablation.lea = on,
                "acc" => self.ablation.acc = on,
                "ens" => self.ablation.ens = on,
                other => return Err(err("--ablate", format!("unknown switch `{other}` (lea|acc|ens)"))),
            }
        }
        Ok(())
    }
}

/// Drops the generic prefix core errors carry; the field name replaces it.
fn strip(msg: &str) -> String {
    msg.strip_prefix("invalid configuration: ").unwrap_or(msg).to_string()
}

/// Dotted path of the key on the line holding byte `pos`, qualified by the
/// nearest table header above it.
fn locate_key(text: &str, pos: usize) -> String {
    let pos = pos.min(text.len());
    let start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next().unwrap_or("").trim();
    let header = |t: &str| t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
    if line.starts_with('[') {
        return header(line);
    }
    let table = text[..start]
        .lines()
        .map(str::trim)
        .rfind(|t| t.starts_with('[') && t.ends_with(']'))
        .map(header)
        .unwrap_or_default();
    match line.split_once('=').map(|(k, _)| k.trim().trim_matches('"').to_string()) {
        Some(k) if table.is_empty() => k,
        Some(k) => format!("{table}.{k}"),
        None => table,
    }
}
