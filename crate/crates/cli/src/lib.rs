//! Command-line front end for lae-core: experiment runs, report comparison
//! and the fast invariant suite.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod presets;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lae_core::checkpoint::write_atomic;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{run_experiment, BackboneCache, RunOptions};
use crate::presets::PresetRun;
use crate::verify::Fault;

#[derive(Parser, Debug)]
#[command(name = "lae", version, about = "Continual learning with adapters, LoRA and prefixes on a frozen transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and evaluate one configuration or preset.
    Run(RunArgs),
    /// Summarise reports as mean ± std over class-order seeds.
    Compare(CompareArgs),
    /// Run the fast invariant suite.
    Verify(VerifyArgs),
    /// List preset names.
    Presets,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// TOML experiment configuration; missing fields take desk defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset, see `lae presets`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Class-order seed; repeat to run several. Replaces the configured list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory; grid presets put each run in a sub-directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation switches, e.g. `acc=off,ens=off,lea=off`.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Continue from the latest task checkpoint of each seed.
    #[arg(long)]
    pub resume: bool,
    /// Class-order seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Report files or directories searched for `report.json`.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Also write the summary as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Deliberately break one invariant to confirm the suite catches it.
    #[arg(long, value_name = "FAULT")]
    pub inject_fault: Option<Fault>,
}

/// Exit code for invalid configurations and arguments.
const USAGE: u8 = 2;

pub fn main_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Verify(a) => Ok(verify_cmd(a)),
        Command::Presets => {
            for n in presets::names() {
                println!("{n}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    outcome.unwrap_or_else(|e| {
        if let Some(c) = e.downcast_ref::<ConfigError>() {
            eprintln!("error: invalid configuration: {c}");
            return ExitCode::from(USAGE);
        }
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

/// Resolves `--config`/`--preset` plus overrides into labelled runs.
pub fn resolve_runs(a: &RunArgs) -> anyhow::Result<Vec<PresetRun>> {
    let mut runs = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            vec![PresetRun { label: String::new(), config: ExperimentConfig::from_toml(&text)? }]
        }
        (None, Some(name)) => presets::resolve(name)?,
        (None, None) => vec![PresetRun { label: String::new(), config: ExperimentConfig::default() }],
    };
    for r in &mut runs {
        if !a.seeds.is_empty() {
            r.config.seeds.class_order = a.seeds.clone();
        }
        if let Some(spec) = &a.ablate {
            r.config.apply_ablate(spec)?;
        }
        if let Some(out) = &a.out {
            r.config.output_dir = if r.label.is_empty() { out.clone() } else { out.join(&r.label) };
        } else if !r.label.is_empty() {
            r.config.output_dir = r.config.output_dir.join(&r.label);
        }
        r.config.validate()?;
    }
    Ok(runs)
}

fn run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let runs = resolve_runs(&a)?;
    if a.print_config {
        for r in &runs {
            if !r.label.is_empty() {
                println!("# {}", r.label);
            }
            print!("{}", r.config.to_toml());
        }
        return Ok(ExitCode::SUCCESS);
    }
    let opts = RunOptions { resume: a.resume, jobs: a.jobs.max(1), verbose: !a.quiet };
    let mut cache = BackboneCache::default();
    let mut reports = Vec::new();
    for r in &runs {
        if !r.label.is_empty() && !a.quiet {
            eprintln!("== {} -> {}", r.label, r.config.output_dir.display());
        }
        for o in run_experiment(&r.config, &opts, &mut cache)? {
            reports.push((o.dir.join("report.json"), o.report));
        }
    }
    let rows = compare::compare(&reports)?;
    print!("{}", compare::render_table(&rows));
    if runs.len() > 1 {
        let root = a.out.clone().unwrap_or_else(|| runs[0].config.output_dir.parent().map(PathBuf::from).unwrap_or_default());
        write_atomic(&root.join("compare.csv"), compare::rows_csv(&rows).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn compare_cmd(a: CompareArgs) -> anyhow::Result<ExitCode> {
    let reports = compare::collect_reports(&a.paths)?;
    let rows = compare::compare(&reports)?;
    print!("{}", compare::render_table(&rows));
    if let Some(path) = &a.csv {
        write_atomic(path, compare::rows_csv(&rows).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(a: VerifyArgs) -> ExitCode {
    let results = verify::run_suite(a.inject_fault);
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
