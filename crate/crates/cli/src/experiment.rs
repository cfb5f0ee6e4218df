//! Executes an [`ExperimentConfig`] and lays its artifacts out on disk.
//!
//! ```text
//! <output_dir>/config.toml          resolved configuration
//! <output_dir>/backbone.lae         pretrained, frozen backbone
//! <output_dir>/pretrain.json        pretext losses and accuracy
//! <output_dir>/seed-<s>/report.json canonical metrics report
//! <output_dir>/seed-<s>/curve.csv   task,accuracy,variant
//! <output_dir>/seed-<s>/acc_matrix.csv
//! <output_dir>/seed-<s>/traces/task-<i>.json
//! <output_dir>/seed-<s>/checkpoints/task-<i>.lae
//! ```
//!
//! Every file is written through a temp file and a rename, so an interrupted
//! run leaves the last task-boundary checkpoint intact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context};
use lae_core::bench::{
    run_lae_resumable, run_seqft_baseline, split_tasks, Dataset, MetricsReport, Progress, RunContext,
};
use lae_core::checkpoint::{write_atomic, Bundle};
use lae_core::continual::TaskTrace;
use lae_core::model::{build_backbone, pretrain_backbone, Backbone, BackboneConfig, PretrainReport};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Continue from the latest task checkpoint of each seed when it belongs
    /// to the same experiment.
    pub resume: bool,
    /// Class-order seeds run concurrently.
    pub jobs: usize,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: false, jobs: 1, verbose: true }
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub class_order_seed: u64,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Pretrained backbones keyed by everything that determines them, so grid
/// runs in one process pretrain once.
#[derive(Default)]
pub struct BackboneCache {
    entries: HashMap<String, (Arc<Backbone>, PretrainReport)>,
}

#[derive(Serialize)]
struct PretrainKey<'a> {
    backbone: &'a BackboneConfig,
    pretext: &'a lae_core::bench::SyntheticSpec,
    pretrain: &'a lae_core::model::PretrainConfig,
    data_class_keys: Vec<u64>,
}

fn pretrain_key(cfg: &ExperimentConfig, bb: &BackboneConfig, pretext: &lae_core::bench::SyntheticSpec) -> String {
    serde_json::to_string(&PretrainKey { backbone: bb, pretext, pretrain: &cfg.pretrain, data_class_keys: cfg.data.class_keys() })
        .expect("plain data")
}

/// Identity of a seed's run, stored in its checkpoints so a resume never
/// mixes experiments.
fn run_key(cfg: &ExperimentConfig, class_order_seed: u64) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    c.seeds.class_order = vec![class_order_seed];
    serde_json::to_string(&c).expect("plain data")
}

fn log(opts: &RunOptions, msg: impl AsRef<str>) {
    if opts.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Continual dataset plus the frozen backbone for `cfg`, pretraining only
/// when neither the cache nor `<output_dir>/backbone.lae` has it.
fn prepare(cfg: &ExperimentConfig, cache: &mut BackboneCache, opts: &RunOptions) -> anyhow::Result<(Dataset, Arc<Backbone>)> {
    let data = lae_core::bench::SyntheticSpec { seed: cfg.seeds.data, ..cfg.data.clone() }.generate()?;
    let bb_cfg = BackboneConfig { seed: cfg.seeds.model, ..cfg.backbone.clone() };
    let pretext_spec = lae_core::bench::SyntheticSpec { seed: cfg.seeds.data, ..cfg.pretext.clone() };
    let key = pretrain_key(cfg, &bb_cfg, &pretext_spec);
    let path = cfg.output_dir.join("backbone.lae");

    if !cache.entries.contains_key(&key) {
        let on_disk = Bundle::load(&path).ok().filter(|b| b.meta["pretrain_key"].as_str() == Some(key.as_str()));
        let entry = match on_disk {
            Some(b) => {
                let report: PretrainReport = serde_json::from_value(b.meta["pretrain"].clone())?;
                let mut bb = Backbone::from_bundle(&b)?;
                bb.freeze();
                log(opts, format!("reusing pretrained backbone {}", path.display()));
                (Arc::new(bb), report)
            }
            None => {
                log(opts, "pretraining backbone on the pretext set");
                let pretext = pretext_spec.generate()?;
                let (bb, report) = pretrain_backbone(build_backbone(&bb_cfg)?, &pretext, &data.class_keys, &cfg.pretrain)?;
                log(opts, format!("pretext accuracy {:.3} (chance {:.3})", report.test_accuracy, report.chance));
                (Arc::new(bb), report)
            }
        };
        cache.entries.insert(key.clone(), entry);
    }
    let (bb, report) = cache.entries[&key].clone();
    let mut bundle = bb.to_bundle();
    bundle.meta["pretrain_key"] = serde_json::Value::String(key);
    bundle.meta["pretrain"] = serde_json::to_value(&report)?;
    bundle.save(&path)?;
    write_json(&cfg.output_dir.join("pretrain.json"), &report)?;
    Ok((data, bb))
}

fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let i: usize = name.strip_prefix("task-")?.strip_suffix(".lae")?.parse().ok()?;
            Some((i, e.path()))
        })
        .max_by_key(|(i, _)| *i)
}

fn write_report(dir: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("curve.csv"), report.curve_csv().as_bytes())?;
    write_atomic(&dir.join("acc_matrix.csv"), report.acc_matrix_csv().as_bytes())?;
    Ok(())
}

fn write_trace(dir: &Path, trace: &TaskTrace) -> anyhow::Result<()> {
    write_json(&dir.join("traces").join(format!("task-{}.json", trace.task + 1)), trace)
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    backbone: &Arc<Backbone>,
    class_order_seed: u64,
    opts: &RunOptions,
) -> anyhow::Result<SeedOutcome> {
    let dir = cfg.output_dir.join(format!("seed-{class_order_seed}"));
    let stream = split_tasks(data, &cfg.split.spec(class_order_seed))?;
    let ctx = RunContext {
        backbone: backbone.clone(),
        seeds: cfg.seeds.for_class_order(class_order_seed),
        dataset_fingerprint: data.fingerprint(),
    };
    let report = match cfg.method {
        Method::Seqft => {
            let out = run_seqft_baseline(&stream, &ctx, &cfg.train)?;
            for t in &out.traces {
                write_trace(&dir, t)?;
            }
            let mut b = Bundle::new("seqft", serde_json::json!({ "run": run_key(cfg, class_order_seed) }));
            b.nest("backbone", out.backbone.to_bundle());
            b.nest("head", out.head.to_bundle());
            b.save(&dir.join("checkpoints").join("final.lae"))?;
            out.report
        }
        Method::Lae | Method::Naive => {
            let key = run_key(cfg, class_order_seed);
            let ckpt_dir = dir.join("checkpoints");
            let resume = match latest_checkpoint(&ckpt_dir).filter(|_| opts.resume) {
                Some((i, path)) => {
                    let b = Bundle::load(&path)?;
                    if b.meta["run"].as_str() != Some(key.as_str()) {
                        bail!("{} belongs to a different experiment; rerun without --resume", path.display());
                    }
                    log(opts, format!("seed {class_order_seed}: resuming after task {i}"));
                    Some(Progress::from_bundle(&b, backbone.clone())?)
                }
                None => None,
            };
            let mut on_task_end = |p: &Progress, trace: &TaskTrace| -> lae_core::Result<()> {
                let mut b = p.to_bundle();
                b.meta["run"] = serde_json::Value::String(key.clone());
                b.save(&ckpt_dir.join(format!("task-{}.lae", p.state.task_index)))?;
                write_trace(&dir, trace).map_err(|e| lae_core::Error::Checkpoint(e.to_string()))?;
                let last = p.ensemble.last().map_or(0.0, |r| r.pooled);
                log(opts, format!("seed {class_order_seed}: task {} done, ensemble A = {last:.4}", p.state.task_index));
                Ok(())
            };
            let out = run_lae_resumable(
                &stream,
                &ctx,
                &cfg.pet,
                &cfg.train,
                cfg.effective_ablation(),
                resume,
                &mut on_task_end,
            )?;
            out.report
        }
    };
    write_report(&dir, &report)?;
    log(
        opts,
        format!(
            "seed {class_order_seed}: {} A_N = {:.4}, mean A = {:.4}, F_N = {:.4}",
            report.method,
            report.last_accuracy(),
            report.average_accuracy(),
            report.metrics.forgetting
        ),
    );
    Ok(SeedOutcome { class_order_seed, dir, report })
}

/// Runs every class-order seed of `cfg`; results come back in seed-list order.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions, cache: &mut BackboneCache) -> anyhow::Result<Vec<SeedOutcome>> {
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_atomic(&cfg.output_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let (data, backbone) = prepare(cfg, cache, opts)?;

    let seeds = &cfg.seeds.class_order;
    let jobs = opts.jobs.clamp(1, seeds.len());
    if jobs == 1 {
        return seeds.iter().map(|&s| run_seed(cfg, &data, &backbone, s, opts)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<SeedOutcome>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(cfg, &data, &backbone, seeds[i], opts);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every seed ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SeedConfig;
    use lae_core::bench::{Ablation, SyntheticSpec};
    use lae_core::continual::TrainConfig;
    use lae_core::model::PretrainConfig;
    use lae_core::pet::{PetConfig, PetKind};

    pub(crate) fn tiny(dir: &Path) -> ExperimentConfig {
        let backbone = BackboneConfig { depth: 2, dim: 8, heads: 2, mlp_ratio: 2, patch_tokens: 4, token_dim: 4, seed: 0 };
        let data = SyntheticSpec {
            num_classes: 6,
            per_class_train: 12,
            per_class_test: 6,
            patch_tokens: 4,
            token_dim: 4,
            prototypes: 6,
            parts: 2,
            ..SyntheticSpec::default()
        };
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            seeds: SeedConfig { model: 1, data: 2, class_order: vec![0, 1] },
            backbone,
            pretext: SyntheticSpec { num_classes: 3, key_offset: 1000, ..data.clone() },
            pretrain: PretrainConfig { epochs: 1, lr: 1e-3, batch_size: 8 },
            data,
            split: crate::config::SplitConfig { num_tasks: 3, classes_per_task: 2 },
            pet: PetConfig { kind: PetKind::Adapter, size: 2, ..PetConfig::default() },
            train: TrainConfig { epochs: 2, freeze_epochs: 1, batch_size: 8, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    fn quiet() -> RunOptions {
        RunOptions { verbose: false, ..RunOptions::default() }
    }

    #[test]
    fn writes_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let out = run_experiment(&cfg, &quiet(), &mut BackboneCache::default()).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(o.report.metrics.pooled.len(), 3);
            for f in ["report.json", "curve.csv", "acc_matrix.csv", "traces/task-1.json", "traces/task-3.json", "checkpoints/task-3.lae"] {
                assert!(o.dir.join(f).is_file(), "{f}");
            }
            let text = std::fs::read_to_string(o.dir.join("report.json")).unwrap();
            assert_eq!(MetricsReport::from_json(&text).unwrap(), o.report);
        }
        for f in ["config.toml", "backbone.lae", "pretrain.json"] {
            assert!(tmp.path().join(f).is_file(), "{f}");
        }
        let back = ExperimentConfig::from_toml(&std::fs::read_to_string(tmp.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reruns_resumes_and_parallel_runs_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let first = run_experiment(&cfg, &quiet(), &mut BackboneCache::default()).unwrap();

        // Drop the last checkpoint so a resume has to retrain task 3 only.
        for o in &first {
            std::fs::remove_file(o.dir.join("checkpoints/task-3.lae")).unwrap();
        }
        let resumed = run_experiment(&cfg, &RunOptions { resume: true, ..quiet() }, &mut BackboneCache::default()).unwrap();
        let parallel = run_experiment(&cfg, &RunOptions { jobs: 2, ..quiet() }, &mut BackboneCache::default()).unwrap();
        for ((a, b), c) in first.iter().zip(&resumed).zip(&parallel) {
            assert_eq!(a.report.to_json(), b.report.to_json());
            assert_eq!(a.report.to_json(), c.report.to_json());
        }

        let other = ExperimentConfig { train: TrainConfig { lr: 0.02, ..cfg.train.clone() }, ..cfg.clone() };
        assert!(run_experiment(&other, &RunOptions { resume: true, ..quiet() }, &mut BackboneCache::default()).is_err());
    }

    #[test]
    fn ablating_everything_is_the_naive_method() {
        let tmp = tempfile::tempdir().unwrap();
        let mut lae = tiny(&tmp.path().join("a"));
        lae.seeds.class_order = vec![3];
        lae.ablation = Ablation::NONE;
        let naive = ExperimentConfig { method: Method::Naive, output_dir: tmp.path().join("b"), ..lae.clone() };
        let mut cache = BackboneCache::default();
        let a = run_experiment(&lae, &quiet(), &mut cache).unwrap();
        let b = run_experiment(&naive, &quiet(), &mut cache).unwrap();
        assert_eq!(a[0].report.to_json(), b[0].report.to_json());
        assert_eq!(a[0].report.method, "naive");
    }

    #[test]
    fn seqft_changes_the_backbone() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path());
        cfg.method = Method::Seqft;
        cfg.seeds.class_order = vec![0];
        let out = run_experiment(&cfg, &quiet(), &mut BackboneCache::default()).unwrap();
        let sums = &out[0].report.backbone_checksums;
        assert!(sums.windows(2).all(|w| w[0] != w[1]));
        assert!(out[0].dir.join("checkpoints/final.lae").is_file());
    }
}
