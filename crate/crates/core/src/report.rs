//! JSON reports and flat long-format CSV tables for external plotting.
//!
//! Layout under the output directory:
//! `reports/*.json` (full results), `tables/*.csv` (one row per
//! class/layer/head), `checkpoints/` (written by the protocol).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, ClassStats};
use crate::error::{Error, Result};
use crate::metrics::log_rescale;
use crate::protocol::{
    mean_amplitudes, Arch, ArchComparison, E1Metric, E1Result, E2Result, ExperimentPlan, PlanOutcome, Setting,
    REPORT_SCHEMA_VERSION,
};

pub const SCATTER_COLUMNS: [&str; 5] = ["class", "log_proportion", "ratio_wm", "log_amplitude", "architecture"];

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn e1_metrics(e1: &E1Result) -> impl Iterator<Item = (Arch, &'static str, &E1Metric)> {
    e1.archs
        .iter()
        .flat_map(|a| [(a.arch, "js", &a.js), (a.arch, "svcca", &a.svcca)])
}

fn first_layer(e1: &E1Result, metric: &str) -> usize {
    // Attention curves start at the first transformer layer.
    if metric == "js" {
        1
    } else {
        e1.svcca_first_layer
    }
}

/// Mean/std layer curves, one row per (architecture, metric, comparison, layer).
pub fn e1_curves_csv(e1: Option<&E1Result>) -> Result<String> {
    let mut rows = Vec::new();
    if let Some(e1) = e1 {
        for (arch, metric, m) in e1_metrics(e1) {
            for (name, c) in [("mi_mb", &m.mi_mb), ("mi_mi", &m.mi_mi), ("mb_mb", &m.mb_mb)] {
                for (l, (mean, std)) in c.mean.iter().zip(&c.std).enumerate() {
                    rows.push(vec![
                        arch.tag().into(),
                        metric.into(),
                        name.into(),
                        (l + first_layer(e1, metric)).to_string(),
                        num(*mean),
                        num(*std),
                        c.pairs.len().to_string(),
                    ]);
                }
            }
        }
    }
    csv_table(&["architecture", "metric", "comparison", "layer", "mean", "std", "pairs"], rows)
}

/// Every model pair's curve.
pub fn e1_pairs_csv(e1: Option<&E1Result>) -> Result<String> {
    let mut rows = Vec::new();
    if let Some(e1) = e1 {
        for (arch, metric, m) in e1_metrics(e1) {
            for (name, c) in [("mi_mb", &m.mi_mb), ("mi_mi", &m.mi_mi), ("mb_mb", &m.mb_mb)] {
                for p in &c.pairs {
                    for (l, v) in p.values.iter().enumerate() {
                        rows.push(vec![
                            arch.tag().into(),
                            metric.into(),
                            name.into(),
                            p.model_a.clone(),
                            p.model_b.clone(),
                            (l + first_layer(e1, metric)).to_string(),
                            num(*v),
                        ]);
                    }
                }
            }
        }
    }
    csv_table(
        &["architecture", "metric", "comparison", "model_a", "model_b", "layer", "value"],
        rows,
    )
}

/// Per-class fairness for every model and ablation (empty `ablated_head` = baseline).
pub fn e2_fairness_csv(results: &[&E2Result]) -> Result<String> {
    let mut rows = Vec::new();
    for e2 in results {
        for m in &e2.models {
            for a in &m.evaluations {
                for c in &a.report.classes {
                    rows.push(vec![
                        e2.arch.tag().into(),
                        m.setting.tag().into(),
                        m.seed.to_string(),
                        a.ablated_head.map(|h| h.to_string()).unwrap_or_default(),
                        c.class.to_string(),
                        opt(c.eo),
                        num(c.f1),
                        c.support.to_string(),
                        c.group_counts[0].to_string(),
                        c.group_counts[1].to_string(),
                        num(a.report.weighted_fscore),
                    ]);
                }
            }
        }
    }
    csv_table(
        &[
            "architecture",
            "setting",
            "seed",
            "ablated_head",
            "class",
            "eo",
            "f1",
            "support",
            "men",
            "women",
            "weighted_fscore",
        ],
        rows,
    )
}

/// Per (model, class) amplitude joined with the class statistics.
pub fn e2_amplitude_csv(results: &[&E2Result]) -> Result<String> {
    let mut rows = Vec::new();
    for e2 in results {
        for r in &e2.amplitudes {
            rows.push(vec![
                e2.arch.tag().into(),
                r.setting.tag().into(),
                r.seed.to_string(),
                r.class.to_string(),
                num(r.proportion),
                num(r.ratio_wm),
                opt(r.baseline_eo),
                num(r.baseline_f1),
                opt(r.amplitude),
                num(r.log_proportion),
                opt(r.log_amplitude),
            ]);
        }
    }
    csv_table(
        &[
            "architecture",
            "setting",
            "seed",
            "class",
            "proportion",
            "ratio_wm",
            "baseline_eo",
            "baseline_f1",
            "amplitude",
            "log_proportion",
            "log_amplitude",
        ],
        rows,
    )
}

/// Amplitude against class imbalance for the imbalanced-setting models,
/// amplitude averaged over seeds. Classes without a defined amplitude are
/// left out (they are listed in the E2 report).
pub fn amplitude_scatter_csv(results: &[&E2Result]) -> Result<String> {
    let mut rows = Vec::new();
    for e2 in results {
        let amps = mean_amplitudes(e2, Setting::Imbalanced);
        for (class, amp) in amps.iter().enumerate() {
            let Some(amp) = amp else { continue };
            let Some(r) = e2
                .amplitudes
                .iter()
                .find(|r| r.setting == Setting::Imbalanced && r.class == class)
            else {
                continue;
            };
            rows.push(vec![
                class.to_string(),
                num(r.log_proportion),
                num(r.ratio_wm),
                num(log_rescale(&[*amp])?[0]),
                e2.arch.tag().into(),
            ]);
        }
    }
    csv_table(&SCATTER_COLUMNS, rows)
}

pub fn comparison_csv(cmp: Option<&ArchComparison>) -> Result<String> {
    let rows = cmp.into_iter().flat_map(|c| {
        c.rows.iter().map(|r| {
            vec![
                c.setting.tag().into(),
                r.class.to_string(),
                num(r.proportion),
                num(r.ratio_wm),
                opt(r.teacher_amplitude),
                opt(r.student_amplitude),
                opt(r.amplitude_delta),
                opt(r.teacher_eo),
                opt(r.student_eo),
                opt(r.eo_delta),
            ]
        })
    });
    csv_table(
        &[
            "setting",
            "class",
            "proportion",
            "ratio_wm",
            "teacher_amplitude",
            "student_amplitude",
            "amplitude_delta",
            "teacher_eo",
            "student_eo",
            "eo_delta",
        ],
        rows,
    )
}

pub fn class_stats_csv(sets: &[(&str, &[ClassStats])]) -> Result<String> {
    let rows = sets.iter().flat_map(|(name, stats)| {
        stats.iter().map(move |s| {
            vec![
                name.to_string(),
                s.class.to_string(),
                s.count.to_string(),
                num(s.proportion),
                num(s.women_fraction),
                num(s.ratio_wm),
            ]
        })
    });
    csv_table(&["dataset", "class", "count", "proportion", "women_fraction", "ratio_wm"], rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub weights_hash: String,
    pub mean_eo: Option<f64>,
    pub weighted_fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub size: usize,
    pub content_hash: String,
    pub classes: Vec<ClassStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub datasets: Vec<DatasetSummary>,
    pub models: Vec<ModelSummary>,
}

pub fn summarize(outcome: &PlanOutcome) -> Result<Summary> {
    let d = &outcome.data;
    let datasets = [
        ("full", &d.full),
        ("train_pool", &d.train_pool),
        ("eval", &d.eval),
        ("balanced", &d.balanced),
        ("imbalanced", &d.imbalanced),
    ]
    .into_iter()
    .map(|(name, c)| {
        Ok(DatasetSummary {
            name: name.into(),
            size: c.len(),
            content_hash: c.content_hash()?,
            classes: corpus::stats(c)?,
        })
    })
    .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::new();
    for e2 in [&outcome.e2_teacher, &outcome.e2_student] {
        for m in &e2.models {
            let key = crate::protocol::ModelKey {
                arch: e2.arch,
                setting: m.setting,
                seed: m.seed,
            };
            models.push(ModelSummary {
                model_id: m.model_id.clone(),
                weights_hash: outcome.zoo.get(&key)?.provenance.weights_hash.clone(),
                mean_eo: m.baseline().mean_eo,
                weighted_fscore: m.baseline().weighted_fscore,
            });
        }
    }
    Ok(Summary {
        schema_version: REPORT_SCHEMA_VERSION,
        datasets,
        models,
    })
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&crate::io::read_to_string(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    crate::io::write_atomic(path, text.as_bytes())
}

/// Renders the CSV tables for whichever results are given into
/// `outdir/tables`; tables for absent results are left untouched.
pub fn write_tables(
    outdir: &Path,
    e1: Option<&E1Result>,
    e2: &[&E2Result],
    cmp: Option<&ArchComparison>,
) -> Result<Vec<std::path::PathBuf>> {
    let tables = outdir.join("tables");
    let mut files = Vec::new();
    if e1.is_some() {
        files.push(("e1_curves.csv", e1_curves_csv(e1)?));
        files.push(("e1_pairs.csv", e1_pairs_csv(e1)?));
    }
    if !e2.is_empty() {
        files.push(("e2_fairness.csv", e2_fairness_csv(e2)?));
        files.push(("e2_amplitude.csv", e2_amplitude_csv(e2)?));
        files.push(("amplitude_scatter.csv", amplitude_scatter_csv(e2)?));
    }
    if cmp.is_some() {
        files.push(("comparison.csv", comparison_csv(cmp)?));
    }
    let mut out = Vec::new();
    for (name, text) in files {
        let p = tables.join(name);
        write(&p, &text)?;
        out.push(p);
    }
    Ok(out)
}

/// Writes the resolved plan, all JSON results and every table.
pub fn write_all(outdir: &Path, plan: &ExperimentPlan, outcome: &PlanOutcome) -> Result<()> {
    let reports = outdir.join("reports");
    let summary = summarize(outcome)?;
    write(&reports.join("plan.json"), &to_json(plan)?)?;
    write(&reports.join("e1.json"), &to_json(&outcome.e1)?)?;
    write(&reports.join("e2_teacher.json"), &to_json(&outcome.e2_teacher)?)?;
    write(&reports.join("e2_student.json"), &to_json(&outcome.e2_student)?)?;
    write(&reports.join("comparison.json"), &to_json(&outcome.comparison)?)?;
    let stats: Vec<(&str, &[ClassStats])> = summary
        .datasets
        .iter()
        .map(|d| (d.name.as_str(), d.classes.as_slice()))
        .collect();
    write(&outdir.join("tables").join("class_stats.csv"), &class_stats_csv(&stats)?)?;
    write_tables(
        outdir,
        Some(&outcome.e1),
        &[&outcome.e2_teacher, &outcome.e2_student],
        Some(&outcome.comparison),
    )?;
    // Written last: its presence marks a complete run.
    write(&reports.join("summary.json"), &to_json(&summary)?)?;
    Ok(())
}

/// Re-renders tables from whatever JSON results exist under `outdir/reports`.
pub fn rerender(outdir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let reports = outdir.join("reports");
    let load_opt = |name: &str| -> Result<Option<std::path::PathBuf>> {
        let p = reports.join(name);
        Ok(p.exists().then_some(p))
    };
    let e1: Option<E1Result> = load_opt("e1.json")?.map(|p| read_json(&p)).transpose()?;
    let mut e2 = Vec::new();
    for name in ["e2_teacher.json", "e2_student.json"] {
        if let Some(p) = load_opt(name)? {
            e2.push(read_json::<E2Result>(&p)?);
        }
    }
    let cmp: Option<ArchComparison> = load_opt("comparison.json")?.map(|p| read_json(&p)).transpose()?;
    if e1.is_none() && e2.is_empty() && cmp.is_none() {
        return Err(Error::invalid(format!("no results found under {}", reports.display())));
    }
    let refs: Vec<&E2Result> = e2.iter().collect();
    write_tables(outdir, e1.as_ref(), &refs, cmp.as_ref())
}
