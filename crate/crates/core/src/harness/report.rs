use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use super::config::StudentSize;
use super::pipeline::{ResultRow, TABLE_RECIPES};
use crate::error::{io_err, Result};
use crate::textproc::CorpusStats;
use crate::train::MetricsRow;

/// Rendered result files, one string per file.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table1: String,
    pub table2: String,
    pub table3: String,
    pub curves: String,
    pub summary: String,
}

/// First checkpoint whose validation BLEU reaches `fraction` of the final
/// checkpoint's.
pub fn convergence_checkpoint(metrics: &[MetricsRow], fraction: f64) -> Option<usize> {
    let last = metrics.last()?.valid_bleu;
    metrics
        .iter()
        .find(|m| m.valid_bleu >= fraction * last)
        .map(|m| m.checkpoint)
}

fn find<'a>(
    rows: &'a [ResultRow],
    name: &str,
    student: StudentSize,
    dropout: bool,
    budget: usize,
) -> Option<&'a ResultRow> {
    rows.iter().find(|r| {
        r.dataset == name && r.student == student && r.dropout == dropout && r.budget == budget
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.2}"),
        _ => "-".into(),
    }
}

fn ordered_names<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = TABLE_RECIPES.iter().map(|s| s.to_string()).collect();
    for n in names {
        if !out.iter().any(|o| o == n) {
            out.push(n.to_string());
        }
    }
    out
}

/// Per-trial BLEU of SMALL students with dropout for base, kd and base+kd.
fn table1(rows: &[ResultRow], budget: usize) -> String {
    let width = rows.iter().map(|r| r.trials.len()).max().unwrap_or(0);
    let mut out = String::from("dataset");
    for i in 1..=width {
        let _ = write!(out, "\ttrial-{i}");
    }
    out.push_str("\tavg\n");
    for name in ["base", "kd", "base+kd"] {
        if let Some(s) =
            find(rows, name, StudentSize::Small, true, budget).and_then(ResultRow::summary)
        {
            out.push_str(&s.table_row(name));
            out.push('\n');
        }
    }
    out
}

fn table2(stats: &BTreeMap<String, CorpusStats>) -> String {
    let mut out = String::from("dataset\tavg_tokens\tvocab_size\n");
    for name in ordered_names(stats.keys().map(String::as_str)) {
        if let Some(s) = stats.get(&name) {
            let _ = writeln!(out, "{name}\t{}\t{}", s.avg_tokens, s.vocab_size);
        }
    }
    out
}

fn table3(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "budget\tdataset\tsmall_bleu\tsmall_train_ppl\tsmall_nodropout_bleu\tsmall_nodropout_train_ppl\tlarge_bleu\tlarge_train_ppl\n",
    );
    let mut budgets: Vec<usize> = rows.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    for budget in budgets {
        for name in ordered_names(rows.iter().map(|r| r.dataset.as_str())) {
            let cols = [
                (StudentSize::Small, true),
                (StudentSize::Small, false),
                (StudentSize::Large, true),
            ]
            .map(|(s, d)| find(rows, &name, s, d, budget));
            if cols.iter().all(Option::is_none) {
                continue;
            }
            let _ = write!(out, "{budget}\t{name}");
            for r in cols {
                let _ = write!(
                    out,
                    "\t{}\t{}",
                    fmt_opt(r.map(|r| r.mean_bleu)),
                    fmt_opt(r.map(|r| r.mean_train_ppl))
                );
            }
            out.push('\n');
        }
    }
    out
}

fn curves(rows: &[ResultRow]) -> String {
    let mut out =
        String::from("cell\tseed\tcheckpoint\tupdates\ttrain_loss\tvalid_ppl\tvalid_bleu\n");
    for r in rows {
        let id = r.cell().id();
        for t in &r.trials {
            for m in &t.metrics {
                let _ = writeln!(
                    out,
                    "{id}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.2}",
                    t.seed, m.checkpoint, m.updates, m.train_loss, m.valid_ppl, m.valid_bleu
                );
            }
        }
    }
    out
}

fn markdown(tsv: &str) -> String {
    let mut out = String::new();
    for (i, line) in tsv.lines().enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

pub fn render_report(
    rows: &[ResultRow],
    stats: &BTreeMap<String, CorpusStats>,
    budget: usize,
) -> Report {
    let (t1, t2, t3) = (table1(rows, budget), table2(stats), table3(rows));
    let mut summary = String::from("# Results\n\n## Student BLEU per trial\n\n");
    summary.push_str(&markdown(&t1));
    summary.push_str("\n## Training data\n\n");
    summary.push_str(&markdown(&t2));
    summary.push_str("\n## Test BLEU and training perplexity\n\n");
    summary.push_str(&markdown(&t3));
    summary.push_str(
        "\n## Convergence\n\nMean first checkpoint reaching 95% of the final validation BLEU.\n\n",
    );
    let mut conv = String::from("cell\tcheckpoint\n");
    for r in rows {
        let cps: Vec<f64> = r
            .trials
            .iter()
            .filter_map(|t| convergence_checkpoint(&t.metrics, 0.95))
            .map(|c| c as f64)
            .collect();
        let mean = (!cps.is_empty()).then(|| cps.iter().sum::<f64>() / cps.len() as f64);
        let _ = writeln!(conv, "{}\t{}", r.cell().id(), fmt_opt(mean));
    }
    summary.push_str(&markdown(&conv));
    let failed: Vec<&ResultRow> = rows.iter().filter(|r| !r.is_complete()).collect();
    if !failed.is_empty() {
        summary.push_str("\n## Incomplete cells\n\n");
        for r in failed {
            let _ = writeln!(
                summary,
                "- {} (seed {}): {}",
                r.cell().id(),
                r.failed_seed.unwrap_or_default(),
                r.error.as_deref().unwrap_or("")
            );
        }
    }
    Report {
        table1: t1,
        table2: t2,
        table3: t3,
        curves: curves(rows),
        summary,
    }
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, text) in [
        ("table1.tsv", &report.table1),
        ("table2.tsv", &report.table2),
        ("table3.tsv", &report.table3),
        ("curves.tsv", &report.curves),
        ("summary.md", &report.summary),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Rebuilds the report from the `row.json` files and dataset statistics
/// under a results directory.
pub fn emit_tables_and_curves(results_dir: &Path) -> Result<Report> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(io_err(p));
    let mut rows: Vec<ResultRow> = Vec::new();
    let cells = results_dir.join("cells");
    if cells.is_dir() {
        let mut dirs: Vec<_> = std::fs::read_dir(&cells)
            .map_err(io_err(&cells))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        dirs.sort();
        for d in dirs {
            let p = d.join("row.json");
            if p.is_file() {
                rows.push(serde_json::from_str(&read(&p)?)?);
            }
        }
    }
    let stats_path = results_dir.join("datasets").join("stats.json");
    let stats = if stats_path.is_file() {
        serde_json::from_str(&read(&stats_path)?)?
    } else {
        BTreeMap::new()
    };
    let exp = results_dir.join("experiment.json");
    let budget = if exp.is_file() {
        serde_json::from_str::<super::ExperimentConfig>(&read(&exp)?)?.budget
    } else {
        rows.iter().map(|r| r.budget).min().unwrap_or(0)
    };
    let report = render_report(&rows, &stats, budget);
    write_report(results_dir, &report)?;
    Ok(report)
}
