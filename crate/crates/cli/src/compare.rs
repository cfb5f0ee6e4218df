//! Side-by-side summary of metrics reports, grouped over class-order seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lae_core::bench::{mean_std, MetricsReport};
use serde::Serialize;

/// One configuration aggregated over its class-order seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub class_order_seeds: Vec<u64>,
    /// `(mean, population std)` of the last incremental accuracy.
    pub last: (f64, f64),
    pub average: (f64, f64),
    pub forgetting: (f64, f64),
}

/// Everything that identifies a configuration except the class order.
#[derive(Serialize)]
struct GroupKey<'a> {
    method: &'a str,
    pet: &'a Option<lae_core::pet::PetConfig>,
    ablation: &'a Option<lae_core::bench::Ablation>,
    train: &'a lae_core::continual::TrainConfig,
    model_seed: u64,
    data_seed: u64,
    variant: lae_core::bench::MetricsVariant,
}

/// Short human label, e.g. `lae adapter-4` or `lae prefix-4 -ens comp-off`.
pub fn describe(r: &MetricsReport) -> String {
    let mut s = r.method.clone();
    if let Some(p) = &r.pet {
        s += &format!(" {}-{}", p.kind.name(), p.size);
        if p.start_block != 0 || p.blocks.is_some() {
            let n = p.blocks.map_or("half".to_string(), |b| b.to_string());
            s += &format!(" @{}+{}", p.start_block, n);
        }
        if p.kind == lae_core::pet::PetKind::Prefix {
            if !p.prefix.compensation {
                s += " comp-off";
            }
            if !p.prefix.scales {
                s += " scale-off";
            }
        }
    }
    if let Some(a) = &r.ablation {
        if !a.is_naive() {
            for (on, name) in [(a.lea, "lea"), (a.acc, "acc"), (a.ens, "ens")] {
                if !on {
                    s += &format!(" -{name}");
                }
            }
        }
    }
    s
}

/// Groups reports by configuration. Refuses reports cut from different
/// splits or data, and a seed that appears twice in one group.
pub fn compare(reports: &[(PathBuf, MetricsReport)]) -> anyhow::Result<Vec<CompareRow>> {
    let Some((first_path, first)) = reports.first() else {
        bail!("nothing to compare");
    };
    let mut groups: BTreeMap<String, Vec<(&Path, &MetricsReport)>> = BTreeMap::new();
    for (path, r) in reports {
        if !r.split.compatible_with(&first.split) {
            bail!(
                "{} and {} use incompatible splits ({}x{} of {} classes, data {} vs {}x{} of {} classes, data {})",
                first_path.display(),
                path.display(),
                first.split.num_tasks,
                first.split.classes_per_task,
                first.split.num_classes,
                short(&first.split.dataset_fingerprint),
                r.split.num_tasks,
                r.split.classes_per_task,
                r.split.num_classes,
                short(&r.split.dataset_fingerprint),
            );
        }
        if r.primary_variant != first.primary_variant {
            bail!("{} and {} report different accuracy variants", first_path.display(), path.display());
        }
        let key = GroupKey {
            method: &r.method,
            pet: &r.pet,
            ablation: &r.ablation,
            train: &r.train,
            model_seed: r.seeds.model,
            data_seed: r.seeds.data,
            variant: r.primary_variant,
        };
        groups.entry(serde_json::to_string(&key)?).or_default().push((path, r));
    }

    let mut label_count: BTreeMap<String, usize> = BTreeMap::new();
    for members in groups.values() {
        *label_count.entry(describe(members[0].1)).or_default() += 1;
    }
    let mut label_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for members in groups.values() {
        let mut seeds: Vec<u64> = members.iter().map(|(_, r)| r.seeds.class_order).collect();
        seeds.sort_unstable();
        if let Some(w) = seeds.windows(2).find(|w| w[0] == w[1]) {
            let dup: Vec<String> =
                members.iter().filter(|(_, r)| r.seeds.class_order == w[0]).map(|(p, _)| p.display().to_string()).collect();
            bail!("class-order seed {} appears more than once: {}", w[0], dup.join(", "));
        }
        let base = describe(members[0].1);
        let label = if label_count[&base] > 1 {
            let n = label_seen.entry(base.clone()).or_default();
            *n += 1;
            format!("{base} #{n}")
        } else {
            base
        };
        let stat = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&members.iter().map(|(_, r)| f(r)).collect::<Vec<_>>());
        rows.push(CompareRow {
            label,
            class_order_seeds: seeds,
            last: stat(&|r| r.last_accuracy()),
            average: stat(&|r| r.average_accuracy()),
            forgetting: stat(&|r| r.metrics.forgetting),
        });
    }
    // Best last accuracy first; the label breaks exact ties.
    rows.sort_by(|a, b| b.last.0.total_cmp(&a.last.0).then_with(|| a.label.cmp(&b.label)));
    Ok(rows)
}

fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}

fn pm(v: (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", 100.0 * v.0, 100.0 * v.1)
}

/// Aligned text table, accuracies in percent.
pub fn render_table(rows: &[CompareRow]) -> String {
    let header = ["config", "seeds", "A_N", "mean A", "F_N"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.class_order_seeds.len().to_string(),
                pm(r.last),
                pm(r.average),
                pm(r.forgetting),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s += c;
                s += &" ".repeat(pad);
            } else {
                s += "  ";
                s += &" ".repeat(pad);
                s += c;
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out += &line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str));
    for row in &body {
        out += &line(row.each_ref().map(String::as_str));
    }
    out
}

/// Machine-readable version of [`render_table`]; fractions, not percent.
pub fn rows_csv(rows: &[CompareRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "seeds", "last_mean", "last_std", "average_mean", "average_std", "forgetting_mean", "forgetting_std"])
        .expect("in-memory write");
    for r in rows {
        let seeds = r.class_order_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        w.write_record([
            r.label.clone(),
            seeds,
            r.last.0.to_string(),
            r.last.1.to_string(),
            r.average.0.to_string(),
            r.average.1.to_string(),
            r.forgetting.0.to_string(),
            r.forgetting.1.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Expands directories into the `report.json` files below them, in path
/// order; plain files are taken as given.
pub fn collect_reports(inputs: &[PathBuf]) -> anyhow::Result<Vec<(PathBuf, MetricsReport)>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            walk(input, &mut paths).with_context(|| format!("reading {}", input.display()))?;
        } else {
            paths.push(input.clone());
        }
    }
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let r = MetricsReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((p, r))
        })
        .collect()
}
