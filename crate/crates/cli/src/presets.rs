//! Named experiment regimes.
//!
//! Single presets: `desk-lae-<kind>[-<size>]`, `desk-naive-<kind>[-<size>]`
//! and `desk-seqft`, with kind one of adapter, lora, prefix. Grid presets
//! expand to several labelled experiments: `ablation-grid`,
//! `prefix-calibration-grid` and `insertion-sweep`.

use std::path::PathBuf;

use lae_core::bench::Ablation;
use lae_core::pet::{PetConfig, PetKind, PrefixVariant};

use crate::config::{ConfigError, ExperimentConfig, Method};

pub const GRID_PRESETS: [&str; 3] = ["ablation-grid", "prefix-calibration-grid", "insertion-sweep"];

/// One experiment of a preset; `label` names its sub-directory (empty for
/// single presets).
#[derive(Clone, Debug, PartialEq)]
pub struct PresetRun {
    pub label: String,
    pub config: ExperimentConfig,
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig { output_dir: PathBuf::from("runs").join(name), ..ExperimentConfig::default() }
}

fn desk(name: &str, method: Method, kind: PetKind, size: Option<usize>) -> ExperimentConfig {
    let mut cfg = base(name);
    cfg.method = method;
    cfg.pet = PetConfig { kind, size: size.unwrap_or(cfg.pet.size), ..PetConfig::default() };
    cfg
}

fn labelled(runs: Vec<(String, ExperimentConfig)>) -> Vec<PresetRun> {
    runs.into_iter().map(|(label, config)| PresetRun { label, config }).collect()
}

pub fn names() -> Vec<String> {
    let mut v: Vec<String> = ["lae", "naive"]
        .iter()
        .flat_map(|m| ["adapter", "lora", "prefix"].map(|k| format!("desk-{m}-{k}[-<size>]")))
        .collect();
    v.push("desk-seqft".into());
    v.extend(GRID_PRESETS.iter().map(|s| s.to_string()));
    v
}

pub fn resolve(name: &str) -> Result<Vec<PresetRun>, ConfigError> {
    let unknown = || ConfigError { field: "--preset".into(), message: format!("unknown preset `{name}`; known: {}", names().join(", ")) };
    match name {
        "desk-seqft" => {
            let mut cfg = base(name);
            cfg.method = Method::Seqft;
            return Ok(labelled(vec![(String::new(), cfg)]));
        }
        "ablation-grid" => {
            let switches = [
                ("full", Ablation::FULL),
                ("no-lea", Ablation { lea: false, ..Ablation::FULL }),
                ("no-acc", Ablation { acc: false, ..Ablation::FULL }),
                ("no-ens", Ablation { ens: false, ..Ablation::FULL }),
                ("naive", Ablation::NONE),
            ];
            return Ok(labelled(
                switches
                    .into_iter()
                    .map(|(label, ablation)| (label.to_string(), ExperimentConfig { ablation, ..base(name) }))
                    .collect(),
            ));
        }
        "prefix-calibration-grid" => {
            let mut runs = Vec::new();
            for compensation in [false, true] {
                for scales in [false, true] {
                    let label = format!("comp-{}-scale-{}", on_off(compensation), on_off(scales));
                    let mut cfg = desk(name, Method::Lae, PetKind::Prefix, None);
                    cfg.pet.prefix = PrefixVariant { compensation, scales, ..PrefixVariant::CALIBRATED };
                    runs.push((label, cfg));
                }
            }
            return Ok(labelled(runs));
        }
        "insertion-sweep" => {
            let depth = base(name).backbone.depth;
            let mut runs = Vec::new();
            for blocks in 1..=depth {
                let mut cfg = base(name);
                cfg.pet.blocks = Some(blocks);
                runs.push((format!("first-{blocks}"), cfg));
            }
            for start in 1..depth {
                let mut cfg = base(name);
                cfg.pet.start_block = start;
                cfg.pet.blocks = Some(1);
                runs.push((format!("only-{start}"), cfg));
            }
            return Ok(labelled(runs));
        }
        _ => {}
    }
    let rest = name.strip_prefix("desk-").ok_or_else(unknown)?;
    let (method, rest) = if let Some(r) = rest.strip_prefix("lae-") {
        (Method::Lae, r)
    } else if let Some(r) = rest.strip_prefix("naive-") {
        (Method::Naive, r)
    } else {
        return Err(unknown());
    };
    let (kind, size) = match rest.split_once('-') {
        Some((k, s)) => (k, Some(s.parse::<usize>().ok().filter(|&s| s > 0).ok_or_else(unknown)?)),
        None => (rest, None),
    };
    let kind: PetKind = kind.parse().map_err(|_| unknown())?;
    Ok(labelled(vec![(String::new(), desk(name, method, kind, size))]))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
