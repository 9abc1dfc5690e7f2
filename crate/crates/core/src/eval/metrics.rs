use std::collections::{BTreeMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::store::PairSet;

/// Candidate restriction applied at retrieval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Only facts in the post's language are candidates.
    Monolingual,
    /// Facts in every language are candidates.
    Crosslingual,
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrievalMode::Monolingual => "monolingual",
            RetrievalMode::Crosslingual => "crosslingual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFact {
    pub fact_id: String,
    pub score: f64,
}

/// Ranked facts per post, best first, at most `k_max` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub mode: RetrievalMode,
    pub k_max: usize,
    pub entries: IndexMap<String, Vec<RankedFact>>,
}

impl RetrievalRun {
    pub fn new(mode: RetrievalMode, k_max: usize) -> Self {
        Self {
            mode,
            k_max,
            entries: IndexMap::new(),
        }
    }

    pub fn ranked_ids(&self, post_id: &str) -> Option<Vec<&str>> {
        self.entries
            .get(post_id)
            .map(|v| v.iter().map(|r| r.fact_id.as_str()).collect())
    }
}

fn positives<'a>(pairs: &'a PairSet, post_id: &str) -> Result<HashSet<&'a str>, EvalError> {
    let e = pairs
        .get(post_id)
        .ok_or_else(|| EvalError::UnknownPost(post_id.to_owned()))?;
    if e.fact_ids.is_empty() {
        return Err(EvalError::NoPositives(post_id.to_owned()));
    }
    Ok(e.fact_ids.iter().map(String::as_str).collect())
}

fn check_k(run: &RetrievalRun, k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK(k));
    }
    if k > run.k_max {
        return Err(EvalError::KOutOfRange { k, k_max: run.k_max });
    }
    Ok(())
}

/// Per-post `(hit, recall)` at cut-off `k`.
fn per_query(
    ranked: &[RankedFact],
    pos: &HashSet<&str>,
    k: usize,
) -> (f64, f64) {
    let hits = ranked
        .iter()
        .take(k)
        .filter(|r| pos.contains(r.fact_id.as_str()))
        .count();
    (
        if hits > 0 { 1.0 } else { 0.0 },
        hits as f64 / pos.len() as f64,
    )
}

/// Fraction of posts with at least one relevant fact in the top `k`.
pub fn success_at_k(run: &RetrievalRun, pairs: &PairSet, k: usize) -> Result<f64, EvalError> {
    check_k(run, k)?;
    if run.entries.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (post, ranked) in &run.entries {
        sum += per_query(ranked, &positives(pairs, post)?, k).0;
    }
    Ok(sum / run.entries.len() as f64)
}

/// Mean over posts of `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k(run: &RetrievalRun, pairs: &PairSet, k: usize) -> Result<f64, EvalError> {
    check_k(run, k)?;
    if run.entries.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (post, ranked) in &run.entries {
        sum += per_query(ranked, &positives(pairs, post)?, k).1;
    }
    Ok(sum / run.entries.len() as f64)
}

/// Label for the query-weighted pooled cell.
pub const POOLED: &str = "ALL";
/// Label for the unweighted mean over languages.
pub const POOLED_MACRO: &str = "ALL_MACRO";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mode: RetrievalMode,
    pub language: String,
    pub k: usize,
    pub success: f64,
    pub recall: f64,
    pub query_count: usize,
}

/// Success/recall per (mode, language, K), plus pooled cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricCell>,
}

impl MetricsReport {
    pub fn get(&self, mode: RetrievalMode, language: &str, k: usize) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.language == language && c.k == k)
    }

    pub fn merge(&mut self, other: MetricsReport) {
        self.cells.extend(other.cells);
    }

    /// Languages present, excluding the pooled labels.
    pub fn languages(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .cells
            .iter()
            .map(|c| c.language.as_str())
            .filter(|l| *l != POOLED && *l != POOLED_MACRO)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Builds the report grid for `ks`, keyed on each post's language.
pub fn compute_report(
    run: &RetrievalRun,
    pairs: &PairSet,
    ks: &[usize],
) -> Result<MetricsReport, EvalError> {
    for &k in ks {
        check_k(run, k)?;
    }
    let by_post = pairs.by_post();
    // language -> k -> (hit sum, recall sum, count)
    let mut acc: BTreeMap<&str, BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    for (post, ranked) in &run.entries {
        let entry = by_post
            .get(post.as_str())
            .ok_or_else(|| EvalError::UnknownPost(post.clone()))?;
        let pos = positives(pairs, post)?;
        for &k in ks {
            let (s, r) = per_query(ranked, &pos, k);
            let cell = acc
                .entry(entry.lang.as_str())
                .or_default()
                .entry(k)
                .or_insert((0.0, 0.0, 0));
            cell.0 += s;
            cell.1 += r;
            cell.2 += 1;
        }
    }

    let mut cells = Vec::new();
    for &k in ks {
        let (mut s_tot, mut r_tot, mut n_tot) = (0.0, 0.0, 0usize);
        let (mut s_mac, mut r_mac, mut n_lang) = (0.0, 0.0, 0usize);
        for (lang, per_k) in &acc {
            let (s, r, n) = per_k[&k];
            cells.push(MetricCell {
                mode: run.mode,
                language: (*lang).to_owned(),
                k,
                success: s / n as f64,
                recall: r / n as f64,
                query_count: n,
            });
            s_tot += s;
            r_tot += r;
            n_tot += n;
            s_mac += s / n as f64;
            r_mac += r / n as f64;
            n_lang += 1;
        }
        let div = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        cells.push(MetricCell {
            mode: run.mode,
            language: POOLED.into(),
            k,
            success: div(s_tot, n_tot),
            recall: div(r_tot, n_tot),
            query_count: n_tot,
        });
        cells.push(MetricCell {
            mode: run.mode,
            language: POOLED_MACRO.into(),
            k,
            success: div(s_mac, n_lang),
            recall: div(r_mac, n_lang),
            query_count: n_tot,
        });
    }
    Ok(MetricsReport { cells })
}
