//! Hard-negative mining: the most similar non-matching facts for each post.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::TopK;
use crate::fsutil::{read_jsonl, write_jsonl};
use crate::linalg::blocks;
use crate::store::{EmbeddingMatrix, PairSet};

pub const DEFAULT_NEGATIVES: usize = 5;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("negative count must be at least 1")]
    InvalidCount,
    #[error("post {post_id}: requested {requested} negatives but only {available} non-positive facts exist")]
    TooManyRequested {
        post_id: String,
        requested: usize,
        available: usize,
    },
    #[error("post {0} has no embedding row")]
    UnknownPost(String),
    #[error("post and fact embeddings differ in width ({post} vs {fact})")]
    DimensionMismatch { post: usize, fact: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Embedding source used for mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningSource {
    Native,
    English,
}

impl std::str::FromStr for MiningSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Self::Native),
            "english" => Ok(Self::English),
            other => Err(format!("unknown mining source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub fact_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NegativeLine {
    post_id: String,
    negatives: Vec<MinedNegative>,
}

/// Per post, the mined facts, most similar first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HardNegativeSet {
    pub entries: IndexMap<String, Vec<MinedNegative>>,
}

impl HardNegativeSet {
    pub fn get(&self, post_id: &str) -> Option<&[MinedNegative]> {
        self.entries.get(post_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), MiningError> {
        let lines: Vec<NegativeLine> = self
            .entries
            .iter()
            .map(|(p, n)| NegativeLine {
                post_id: p.clone(),
                negatives: n.clone(),
            })
            .collect();
        write_jsonl(path, &lines)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MiningError> {
        let lines: Vec<NegativeLine> = read_jsonl(path)?;
        Ok(Self {
            entries: lines.into_iter().map(|l| (l.post_id, l.negatives)).collect(),
        })
    }
}

/// Mines `m` negatives for each post in `posts` (all posts in `pairs` when `None`).
///
/// Embeddings are expected to be unit-normalized so dot products are cosines.
/// Ties go to the lower fact row.
pub fn mine_hard_negatives(
    post_embs: &EmbeddingMatrix,
    fact_embs: &EmbeddingMatrix,
    pairs: &PairSet,
    m: usize,
    posts: Option<&[&str]>,
) -> Result<HardNegativeSet, MiningError> {
    mine_blockwise(post_embs, fact_embs, pairs, m, posts, 256, 4096)
}

pub fn mine_blockwise(
    post_embs: &EmbeddingMatrix,
    fact_embs: &EmbeddingMatrix,
    pairs: &PairSet,
    m: usize,
    posts: Option<&[&str]>,
    post_block: usize,
    fact_block: usize,
) -> Result<HardNegativeSet, MiningError> {
    if m == 0 {
        return Err(MiningError::InvalidCount);
    }
    if post_embs.cols() != fact_embs.cols() {
        return Err(MiningError::DimensionMismatch {
            post: post_embs.cols(),
            fact: fact_embs.cols(),
        });
    }
    let post_ids: Vec<&str> = match posts {
        Some(p) => p.to_vec(),
        None => pairs.post_ids().collect(),
    };
    let post_index = post_embs.index();
    let fact_index = fact_embs.index();
    let by_post = pairs.by_post();
    let n_facts = fact_embs.rows();

    let mut rows = Vec::with_capacity(post_ids.len());
    let mut positive_rows: Vec<HashSet<usize>> = Vec::with_capacity(post_ids.len());
    for &pid in &post_ids {
        let r = *post_index
            .get(pid)
            .ok_or_else(|| MiningError::UnknownPost(pid.to_owned()))?;
        let pos: HashSet<usize> = by_post
            .get(pid)
            .map(|e| {
                e.fact_ids
                    .iter()
                    .filter_map(|f| fact_index.get(f.as_str()).copied())
                    .collect()
            })
            .unwrap_or_default();
        let available = n_facts - pos.len();
        if m > available {
            return Err(MiningError::TooManyRequested {
                post_id: pid.to_owned(),
                requested: m,
                available,
            });
        }
        rows.push(r);
        positive_rows.push(pos);
    }

    let facts = fact_embs.to_f64();
    let post_blocks: Vec<(usize, usize)> = blocks(rows.len(), post_block.max(1)).collect();
    let lists: Vec<Vec<Vec<(usize, f64)>>> = post_blocks
        .into_par_iter()
        .map(|(ps, pe)| {
            let p = post_embs.gather_f64(&rows[ps..pe]);
            let mut accs: Vec<TopK> = (ps..pe).map(|_| TopK::new(m)).collect();
            for (fs, fe) in blocks(n_facts, fact_block.max(1)) {
                let tile = p.matmul_t(&facts.row_range(fs, fe));
                for (j, acc) in accs.iter_mut().enumerate() {
                    let pos = &positive_rows[ps + j];
                    for (k, &s) in tile.row(j).iter().enumerate() {
                        if !pos.contains(&(fs + k)) {
                            acc.push(fs + k, s);
                        }
                    }
                }
            }
            accs.into_iter().map(TopK::into_sorted).collect()
        })
        .collect();

    let ids = fact_embs.ids();
    let entries = post_ids
        .iter()
        .zip(lists.into_iter().flatten())
        .map(|(pid, list)| {
            (
                (*pid).to_owned(),
                list.into_iter()
                    .map(|(i, s)| MinedNegative {
                        fact_id: ids[i].clone(),
                        score: s,
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(HardNegativeSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{PostPairs, SourceTag};

    fn emb(ids: &[&str], rows: &[Vec<f32>], tag: SourceTag) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows, tag).unwrap()
    }

    fn pairs(post: &str, facts: &[&str]) -> PairSet {
        PairSet::new(
            vec![PostPairs {
                post_id: post.into(),
                fact_ids: facts.iter().map(|s| s.to_string()).collect(),
                lang: "eng".into(),
            }],
            Default::default(),
        )
    }

    #[test]
    fn excludes_positive_and_ranks_rest() {
        let posts = emb(&["p"], &[vec![1.0, 0.0]], SourceTag::PostEnglish);
        let facts = emb(
            &["f0", "f1", "f2"],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]],
            SourceTag::FactEnglish,
        );
        let set = mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 2, None).unwrap();
        let ids: Vec<&str> = set.get("p").unwrap().iter().map(|n| n.fact_id.as_str()).collect();
        assert_eq!(ids, vec!["f2", "f1"]);
    }

    #[test]
    fn everything_positive_is_an_error() {
        let posts = emb(&["p"], &[vec![1.0, 0.0]], SourceTag::PostEnglish);
        let facts = emb(&["f0"], &[vec![1.0, 0.0]], SourceTag::FactEnglish);
        assert!(matches!(
            mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 1, None),
            Err(MiningError::TooManyRequested { available: 0, .. })
        ));
    }

    #[test]
    fn orthogonal_tie_takes_lowest_row() {
        let posts = emb(&["p"], &[vec![1.0, 0.0, 0.0]], SourceTag::PostEnglish);
        let facts = emb(
            &["f0", "f1", "f2"],
            &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
            SourceTag::FactEnglish,
        );
        let set = mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 1, None).unwrap();
        assert_eq!(set.get("p").unwrap()[0].fact_id, "f1");
    }

    #[test]
    fn exact_count_allowed_and_file_round_trip() {
        let posts = emb(&["p"], &[vec![1.0, 0.0]], SourceTag::PostEnglish);
        let facts = emb(
            &["f0", "f1", "f2"],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]],
            SourceTag::FactEnglish,
        );
        let set = mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.jsonl");
        set.save(&path).unwrap();
        assert_eq!(HardNegativeSet::load(&path).unwrap(), set);
        assert!(mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 3, None).is_err());
        assert!(matches!(
            mine_hard_negatives(&posts, &facts, &pairs("p", &["f0"]), 0, None),
            Err(MiningError::InvalidCount)
        ));
    }
}
