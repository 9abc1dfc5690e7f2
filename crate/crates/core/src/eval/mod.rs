//! Top-K retrieval over fused scores and Success@K / Recall@K reporting.

mod io;
mod metrics;
mod topk;

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{blocks, Matrix};
use crate::model::{encode_side, score_tile, ModelError, ModelParams, Side, SideInputs};
use crate::store::{DatasetBundle, PostPairs, SplitRole};

pub use io::{read_run, report_csv, write_report, write_run, RunLine};
pub use metrics::{
    compute_report, recall_at_k, success_at_k, MetricCell, MetricsReport, RankedFact,
    RetrievalMode, RetrievalRun, POOLED, POOLED_MACRO,
};
pub use topk::{top_k, TopK};

/// Cut-offs reported by default.
pub const REPORT_KS: [usize; 3] = [1, 10, 20];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("k = {k} exceeds run depth {k_max}")]
    KOutOfRange { k: usize, k_max: usize },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("post {0} is not in the pair set")]
    UnknownPost(String),
    #[error("post {0} has no relevant facts")]
    NoPositives(String),
    #[error("post {0} has no embedding row")]
    MissingPostRow(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which posts to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    Dev,
    Train,
    All,
}

impl EvalScope {
    pub fn select<'a>(self, bundle: &'a DatasetBundle) -> Vec<&'a PostPairs> {
        match self {
            EvalScope::Dev => bundle.posts_in(SplitRole::Dev),
            EvalScope::Train => bundle.posts_in(SplitRole::Train),
            EvalScope::All => bundle.pairs.entries.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub mode: RetrievalMode,
    pub k_max: usize,
    pub scope: EvalScope,
    pub fact_block: usize,
    pub post_block: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Monolingual,
            k_max: 20,
            scope: EvalScope::Dev,
            fact_block: 4096,
            post_block: 256,
        }
    }
}

/// Candidate mask for one post: every fact (crosslingual) or only same-language facts.
fn candidate(mode: RetrievalMode, post_lang: &str, fact_lang: Option<&str>) -> bool {
    match mode {
        RetrievalMode::Crosslingual => true,
        RetrievalMode::Monolingual => fact_lang == Some(post_lang),
    }
}

/// Builds a run from a precomputed `facts x posts` score matrix.
pub fn run_from_score_matrix(
    scores: &Matrix,
    fact_ids: &[String],
    fact_langs: &[Option<&str>],
    posts: &[&PostPairs],
    mode: RetrievalMode,
    k_max: usize,
) -> Result<RetrievalRun, EvalError> {
    if k_max == 0 {
        return Err(EvalError::InvalidK(0));
    }
    let mut run = RetrievalRun::new(mode, k_max);
    for (j, post) in posts.iter().enumerate() {
        let mut acc = TopK::new(k_max);
        for i in 0..scores.rows() {
            if candidate(mode, &post.lang, fact_langs[i]) {
                acc.push(i, scores.get(i, j));
            }
        }
        run.entries.insert(
            post.post_id.clone(),
            acc.into_sorted()
                .into_iter()
                .map(|(i, s)| RankedFact {
                    fact_id: fact_ids[i].clone(),
                    score: s,
                })
                .collect(),
        );
    }
    Ok(run)
}

/// Retrieves the top `k_max` facts for every post in scope and reports metrics
/// at K in {1, 10, 20} (those not above `k_max`).
///
/// Scores are produced tile by tile, so memory stays bounded by the block sizes.
pub fn evaluate(
    model: &ModelParams,
    bundle: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<(RetrievalRun, MetricsReport), EvalError> {
    let posts = opts.scope.select(bundle);
    let run = retrieve(model, bundle, &posts, opts)?;
    let ks: Vec<usize> = REPORT_KS.iter().copied().filter(|&k| k <= opts.k_max).collect();
    let report = compute_report(&run, &bundle.pairs, &ks)?;
    Ok((run, report))
}

/// Top-`k_max` retrieval for the given posts.
pub fn retrieve(
    model: &ModelParams,
    bundle: &DatasetBundle,
    posts: &[&PostPairs],
    opts: &EvalOptions,
) -> Result<RetrievalRun, EvalError> {
    if opts.k_max == 0 {
        return Err(EvalError::InvalidK(0));
    }
    let post_index = bundle.post_native.index();
    let rows: Vec<usize> = posts
        .iter()
        .map(|p| {
            post_index
                .get(p.post_id.as_str())
                .copied()
                .ok_or_else(|| EvalError::MissingPostRow(p.post_id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let fact_native = bundle.fact_native.to_f64();
    let fact_english = bundle.fact_english.to_f64();
    let facts = encode_side(
        model,
        Side::Fact,
        SideInputs {
            native: &fact_native,
            english: &fact_english,
        },
        opts.fact_block,
    )?;
    let post_native = bundle.post_native.gather_f64(&rows);
    let post_english = bundle.post_english.gather_f64(&rows);
    let post_emb = encode_side(
        model,
        Side::Post,
        SideInputs {
            native: &post_native,
            english: &post_english,
        },
        opts.post_block,
    )?;
    let fact_langs = bundle.fact_row_languages();
    let n_facts = facts.len();

    let post_blocks: Vec<(usize, usize)> = blocks(posts.len(), opts.post_block).collect();
    let ranked: Vec<Vec<Vec<(usize, f64)>>> = post_blocks
        .into_par_iter()
        .map(|pr| {
            let mut accs: Vec<TopK> = (pr.0..pr.1).map(|_| TopK::new(opts.k_max)).collect();
            for fr in blocks(n_facts, opts.fact_block) {
                let tile = score_tile(model, &facts, &post_emb, fr, pr)?;
                for (j, acc) in accs.iter_mut().enumerate() {
                    let lang = posts[pr.0 + j].lang.as_str();
                    for i in 0..tile.rows() {
                        let fi = fr.0 + i;
                        if candidate(opts.mode, lang, fact_langs[fi]) {
                            acc.push(fi, tile.get(i, j));
                        }
                    }
                }
            }
            Ok(accs.into_iter().map(TopK::into_sorted).collect())
        })
        .collect::<Result<_, EvalError>>()?;

    let fact_ids = bundle.fact_native.ids();
    let mut run = RetrievalRun::new(opts.mode, opts.k_max);
    for (post, list) in posts.iter().zip(ranked.into_iter().flatten()) {
        run.entries.insert(
            post.post_id.clone(),
            list.into_iter()
                .map(|(i, s)| RankedFact {
                    fact_id: fact_ids[i].clone(),
                    score: s,
                })
                .collect(),
        );
    }
    Ok(run)
}

/// Language of each fact ID, for checking monolingual runs.
pub fn fact_language_map(bundle: &DatasetBundle) -> HashMap<&str, &str> {
    bundle
        .pairs
        .fact_languages
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect()
}
