use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsReport, RankedFact, RetrievalMode, RetrievalRun, EvalError};
use crate::fsutil::{read_jsonl, write_atomic, write_jsonl};

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub post_id: String,
    pub ranked: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

pub fn write_run(path: &Path, run: &RetrievalRun) -> Result<(), EvalError> {
    let lines: Vec<RunLine> = run
        .entries
        .iter()
        .map(|(post, list)| RunLine {
            post_id: post.clone(),
            ranked: list.iter().map(|r| r.fact_id.clone()).collect(),
            scores: Some(list.iter().map(|r| r.score).collect()),
        })
        .collect();
    write_jsonl(path, &lines)?;
    Ok(())
}

/// Reads a run file. Lines without scores get `-rank` so order is preserved.
pub fn read_run(path: &Path, mode: RetrievalMode) -> Result<RetrievalRun, EvalError> {
    let lines: Vec<RunLine> = read_jsonl(path)?;
    let k_max = lines.iter().map(|l| l.ranked.len()).max().unwrap_or(0).max(1);
    let mut run = RetrievalRun::new(mode, k_max);
    for line in lines {
        let list = line
            .ranked
            .iter()
            .enumerate()
            .map(|(i, id)| RankedFact {
                fact_id: id.clone(),
                score: line
                    .scores
                    .as_ref()
                    .and_then(|s| s.get(i).copied())
                    .unwrap_or(-(i as f64)),
            })
            .collect();
        run.entries.insert(line.post_id, list);
    }
    Ok(run)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<&'a serde_json::Value>,
    cells: &'a [super::MetricCell],
}

/// Writes the report as JSON, with an optional provenance object under `run`.
pub fn write_report(
    path: &Path,
    report: &MetricsReport,
    provenance: Option<&serde_json::Value>,
) -> Result<(), EvalError> {
    let body = serde_json::to_vec_pretty(&ReportFile {
        run: provenance,
        cells: &report.cells,
    })
    .map_err(std::io::Error::other)?;
    write_atomic(path, &body)?;
    Ok(())
}

/// One row per (mode, language); columns R@K for each K then S@K for each K.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut ks: Vec<usize> = report.cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut rows: Vec<(RetrievalMode, &str)> = Vec::new();
    for c in &report.cells {
        if !rows.iter().any(|r| r.0 == c.mode && r.1 == c.language) {
            rows.push((c.mode, &c.language));
        }
    }
    let mut out = String::from("mode,language");
    for k in &ks {
        let _ = write!(out, ",R@{k}");
    }
    for k in &ks {
        let _ = write!(out, ",S@{k}");
    }
    out.push_str(",queries\n");
    for (mode, lang) in rows {
        let _ = write!(out, "{mode},{lang}");
        let mut n = 0;
        for metric in [0, 1] {
            for &k in &ks {
                match report.get(mode, lang, k) {
                    Some(c) => {
                        n = c.query_count;
                        let v = if metric == 0 { c.recall } else { c.success };
                        let _ = write!(out, ",{v:.4}");
                    }
                    None => out.push(','),
                }
            }
        }
        let _ = writeln!(out, ",{n}");
    }
    out
}
