use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_matrix, EmbeddingMatrix, SourceTag, StoreError};

/// Ground-truth facts for one post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostPairs {
    pub post_id: String,
    pub fact_ids: Vec<String>,
    /// ISO 639-3 code of the post.
    pub lang: String,
}

/// The post -> fact relevance relation plus fact languages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub entries: Vec<PostPairs>,
    pub fact_languages: BTreeMap<String, String>,
}

impl PairSet {
    pub fn new(entries: Vec<PostPairs>, fact_languages: BTreeMap<String, String>) -> Self {
        Self {
            entries,
            fact_languages,
        }
    }

    pub fn get(&self, post_id: &str) -> Option<&PostPairs> {
        self.entries.iter().find(|e| e.post_id == post_id)
    }

    /// Lookup table from post ID to its entry.
    pub fn by_post(&self) -> HashMap<&str, &PostPairs> {
        self.entries
            .iter()
            .map(|e| (e.post_id.as_str(), e))
            .collect()
    }

    pub fn post_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.post_id.as_str())
    }

    /// Reads the JSON Lines pairs file and the fact-language JSON object.
    pub fn load(pairs_path: &Path, fact_lang_path: &Path) -> Result<Self, StoreError> {
        let entries = crate::fsutil::read_jsonl(pairs_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => StoreError::Parse {
                path: pairs_path.into(),
                message: e.to_string(),
            },
            _ => StoreError::io(pairs_path, e),
        })?;
        let text =
            std::fs::read_to_string(fact_lang_path).map_err(|e| StoreError::io(fact_lang_path, e))?;
        let fact_languages = serde_json::from_str(&text).map_err(|e| StoreError::Parse {
            path: fact_lang_path.into(),
            message: e.to_string(),
        })?;
        Ok(Self {
            entries,
            fact_languages,
        })
    }

    pub fn save(&self, pairs_path: &Path, fact_lang_path: &Path) -> Result<(), StoreError> {
        crate::fsutil::write_jsonl(pairs_path, &self.entries)
            .map_err(|e| StoreError::io(pairs_path, e))?;
        let json = serde_json::to_vec_pretty(&self.fact_languages).expect("map serializes");
        crate::fsutil::write_atomic(fact_lang_path, &json)
            .map_err(|e| StoreError::io(fact_lang_path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Dev,
}

/// Assigns `round(dev_fraction * |posts|)` posts to dev, chosen by a seeded shuffle.
pub fn split_dataset(
    pairs: &PairSet,
    dev_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, SplitRole>, StoreError> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(StoreError::InvalidDevFraction(dev_fraction));
    }
    let mut posts: Vec<&str> = pairs.post_ids().collect();
    let n_dev = (dev_fraction * posts.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    posts.shuffle(&mut rng);
    Ok(posts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let role = if i < n_dev {
                SplitRole::Dev
            } else {
                SplitRole::Train
            };
            ((*p).to_owned(), role)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub dev_fraction: f64,
}

/// On-disk description of a dataset. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub post_native: PathBuf,
    pub post_english: PathBuf,
    pub fact_native: PathBuf,
    pub fact_english: PathBuf,
    pub pairs: PathBuf,
    pub fact_languages: PathBuf,
    pub split: SplitSpec,
    /// Explicit split file (`{post_id: "train"|"dev"}`); overrides `split` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_path: Option<PathBuf>,
}

impl BundleManifest {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Parse {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        crate::fsutil::write_atomic(path, &json).map_err(|e| StoreError::io(path, e))
    }

    /// Every file the manifest references, resolved against `base`.
    pub fn referenced_paths(&self, base: &Path) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = [
            &self.post_native,
            &self.post_english,
            &self.fact_native,
            &self.fact_english,
            &self.pairs,
            &self.fact_languages,
        ]
        .iter()
        .map(|p| base.join(p))
        .collect();
        if let Some(s) = &self.split_path {
            v.push(base.join(s));
        }
        v
    }
}

/// Four embedding sources, the relevance relation, and the train/dev split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub post_native: EmbeddingMatrix,
    pub post_english: EmbeddingMatrix,
    pub fact_native: EmbeddingMatrix,
    pub fact_english: EmbeddingMatrix,
    pub pairs: PairSet,
    pub split: BTreeMap<String, SplitRole>,
}

impl DatasetBundle {
    /// Loads every file named by the manifest. Zero-norm rows are rejected here.
    pub fn load(manifest_path: &Path) -> Result<Self, StoreError> {
        let manifest = BundleManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let load = |p: &PathBuf| -> Result<EmbeddingMatrix, StoreError> {
            let m = load_matrix(&base.join(p))?;
            match m.first_zero_row() {
                Some(r) => Err(StoreError::ZeroRow(r)),
                None => Ok(m),
            }
        };
        let post_native = load(&manifest.post_native)?;
        let post_english = load(&manifest.post_english)?;
        let fact_native = load(&manifest.fact_native)?;
        let fact_english = load(&manifest.fact_english)?;
        let pairs = PairSet::load(
            &base.join(&manifest.pairs),
            &base.join(&manifest.fact_languages),
        )?;
        let split = match &manifest.split_path {
            Some(p) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
                serde_json::from_str(&text).map_err(|e| StoreError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?
            }
            None => split_dataset(&pairs, manifest.split.dev_fraction, manifest.split.seed)?,
        };
        Ok(Self {
            post_native,
            post_english,
            fact_native,
            fact_english,
            pairs,
            split,
        })
    }

    /// Writes the bundle's files next to `manifest_path` under fixed names.
    pub fn save(&self, manifest_path: &Path, split: SplitSpec) -> Result<BundleManifest, StoreError> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(base).map_err(|e| StoreError::io(base, e))?;
        let manifest = BundleManifest {
            post_native: "post_native.taln".into(),
            post_english: "post_english.taln".into(),
            fact_native: "fact_native.taln".into(),
            fact_english: "fact_english.taln".into(),
            pairs: "pairs.jsonl".into(),
            fact_languages: "fact_languages.json".into(),
            split,
            split_path: None,
        };
        super::save_matrix(&self.post_native, &base.join(&manifest.post_native))?;
        super::save_matrix(&self.post_english, &base.join(&manifest.post_english))?;
        super::save_matrix(&self.fact_native, &base.join(&manifest.fact_native))?;
        super::save_matrix(&self.fact_english, &base.join(&manifest.fact_english))?;
        self.pairs.save(
            &base.join(&manifest.pairs),
            &base.join(&manifest.fact_languages),
        )?;
        manifest.save(manifest_path)?;
        Ok(manifest)
    }

    pub fn native_dim(&self) -> usize {
        self.post_native.cols()
    }

    pub fn english_dim(&self) -> usize {
        self.post_english.cols()
    }

    /// Posts from the pair set in the given role, in pair-set order.
    pub fn posts_in(&self, role: SplitRole) -> Vec<&PostPairs> {
        self.pairs
            .entries
            .iter()
            .filter(|e| self.split.get(&e.post_id) == Some(&role))
            .collect()
    }

    /// Language of every fact row, aligned with the fact matrices.
    pub fn fact_row_languages(&self) -> Vec<Option<&str>> {
        self.fact_native
            .ids()
            .iter()
            .map(|id| self.pairs.fact_languages.get(id).map(String::as_str))
            .collect()
    }
}

/// One broken bundle invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WrongSourceTag { slot: SourceTag, found: SourceTag },
    IdOrderMismatch { family: &'static str, row: usize },
    RowCountMismatch { family: &'static str, native: usize, english: usize },
    DimensionMismatch { family: &'static str, post: usize, fact: usize },
    ZeroRow { source: SourceTag, row: usize },
    DuplicatePost { post_id: String },
    UnknownPost { post_id: String },
    UnknownFact { post_id: String, fact_id: String },
    NoPositives { post_id: String },
    MissingFactLanguage { fact_id: String },
    MissingFromSplit { post_id: String },
    SplitUnknownPost { post_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongSourceTag { slot, found } => {
                write!(f, "{slot} slot holds a matrix tagged {found}")
            }
            Violation::IdOrderMismatch { family, row } => {
                write!(f, "{family} native/english id order differs at row {row}")
            }
            Violation::RowCountMismatch {
                family,
                native,
                english,
            } => write!(
                f,
                "{family} native has {native} rows but english has {english}"
            ),
            Violation::DimensionMismatch { family, post, fact } => write!(
                f,
                "{family} dimension differs: posts {post}, facts {fact}"
            ),
            Violation::ZeroRow { source, row } => write!(f, "{source} row {row} has zero norm"),
            Violation::DuplicatePost { post_id } => {
                write!(f, "post {post_id} listed more than once in pairs")
            }
            Violation::UnknownPost { post_id } => {
                write!(f, "post {post_id} has no embedding row")
            }
            Violation::UnknownFact { post_id, fact_id } => {
                write!(f, "post {post_id} references unknown fact {fact_id}")
            }
            Violation::NoPositives { post_id } => {
                write!(f, "post {post_id} has no ground-truth fact")
            }
            Violation::MissingFactLanguage { fact_id } => {
                write!(f, "fact {fact_id} has no language")
            }
            Violation::MissingFromSplit { post_id } => {
                write!(f, "post {post_id} is not assigned to train or dev")
            }
            Violation::SplitUnknownPost { post_id } => {
                write!(f, "split assigns unknown post {post_id}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every broken invariant of `b`; an empty report means the bundle is usable.
pub fn validate_bundle(b: &DatasetBundle) -> ValidationReport {
    let mut v = Vec::new();

    for (slot, m) in [
        (SourceTag::PostNative, &b.post_native),
        (SourceTag::PostEnglish, &b.post_english),
        (SourceTag::FactNative, &b.fact_native),
        (SourceTag::FactEnglish, &b.fact_english),
    ] {
        if m.source() != slot {
            v.push(Violation::WrongSourceTag {
                slot,
                found: m.source(),
            });
        }
        if let Some(row) = m.first_zero_row() {
            v.push(Violation::ZeroRow { source: slot, row });
        }
    }

    for (family, native, english) in [
        ("post", &b.post_native, &b.post_english),
        ("fact", &b.fact_native, &b.fact_english),
    ] {
        if native.rows() != english.rows() {
            v.push(Violation::RowCountMismatch {
                family,
                native: native.rows(),
                english: english.rows(),
            });
        }
        if let Some(row) = native
            .ids()
            .iter()
            .zip(english.ids())
            .position(|(a, b)| a != b)
        {
            v.push(Violation::IdOrderMismatch { family, row });
        }
    }

    for (family, post, fact) in [
        ("native", &b.post_native, &b.fact_native),
        ("english", &b.post_english, &b.fact_english),
    ] {
        if post.cols() != fact.cols() {
            v.push(Violation::DimensionMismatch {
                family,
                post: post.cols(),
                fact: fact.cols(),
            });
        }
    }

    let post_ids: HashSet<&str> = b.post_native.ids().iter().map(String::as_str).collect();
    let fact_ids: HashSet<&str> = b.fact_native.ids().iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    for e in &b.pairs.entries {
        if !seen.insert(e.post_id.as_str()) {
            v.push(Violation::DuplicatePost {
                post_id: e.post_id.clone(),
            });
        }
        if !post_ids.contains(e.post_id.as_str()) {
            v.push(Violation::UnknownPost {
                post_id: e.post_id.clone(),
            });
        }
        if e.fact_ids.is_empty() {
            v.push(Violation::NoPositives {
                post_id: e.post_id.clone(),
            });
        }
        for f in &e.fact_ids {
            if !fact_ids.contains(f.as_str()) {
                v.push(Violation::UnknownFact {
                    post_id: e.post_id.clone(),
                    fact_id: f.clone(),
                });
            }
        }
        if !b.split.contains_key(&e.post_id) {
            v.push(Violation::MissingFromSplit {
                post_id: e.post_id.clone(),
            });
        }
    }
    for id in b.fact_native.ids() {
        if !b.pairs.fact_languages.contains_key(id) {
            v.push(Violation::MissingFactLanguage {
                fact_id: id.clone(),
            });
        }
    }
    for post_id in b.split.keys() {
        if !seen.contains(post_id.as_str()) {
            v.push(Violation::SplitUnknownPost {
                post_id: post_id.clone(),
            });
        }
    }

    ValidationReport { violations: v }
}
