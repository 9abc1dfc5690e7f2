//! Embedding matrices, ground-truth pairs, and dataset bundles.

mod bundle;
mod format;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub use bundle::{
    split_dataset, validate_bundle, BundleManifest, DatasetBundle, PairSet, PostPairs,
    SplitRole, SplitSpec, ValidationReport, Violation,
};
pub use format::{
    encode_matrix, decode_matrix, load_matrix, save_matrix, FORMAT_VERSION, HEADER_LEN, MAGIC,
};

/// Rows with an L2 norm below this are treated as zero.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown source tag {0}")]
    UnknownSourceTag(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("dimensions {rows}x{cols} overflow or exceed the file size")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after ID table")]
    TrailingBytes(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("id table has {ids} entries for {rows} rows")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("id at position {0} is not valid UTF-8")]
    InvalidUtf8(usize),
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("dev fraction {0} must lie strictly between 0 and 1")]
    InvalidDevFraction(f64),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Which of the four exported embedding sources a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    PostNative,
    PostEnglish,
    FactNative,
    FactEnglish,
}

impl SourceTag {
    pub fn code(self) -> u8 {
        match self {
            SourceTag::PostNative => 0,
            SourceTag::PostEnglish => 1,
            SourceTag::FactNative => 2,
            SourceTag::FactEnglish => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, StoreError> {
        Ok(match code {
            0 => SourceTag::PostNative,
            1 => SourceTag::PostEnglish,
            2 => SourceTag::FactNative,
            3 => SourceTag::FactEnglish,
            other => return Err(StoreError::UnknownSourceTag(other)),
        })
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::PostNative => "post_native",
            SourceTag::PostEnglish => "post_english",
            SourceTag::FactNative => "fact_native",
            SourceTag::FactEnglish => "fact_english",
        })
    }
}

/// `N x D` block of `f32` embeddings with one ID per row.
///
/// Row order is authoritative: row `i` is the embedding of `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Vec<f32>,
    cols: usize,
    source: SourceTag,
}

impl EmbeddingMatrix {
    /// Checks ID count, ID uniqueness, and finiteness.
    pub fn new(
        ids: Vec<String>,
        data: Vec<f32>,
        cols: usize,
        source: SourceTag,
    ) -> Result<Self, StoreError> {
        let rows = ids.len();
        if data.len() != rows.checked_mul(cols).unwrap_or(usize::MAX) {
            return Err(StoreError::IdCountMismatch {
                ids: ids.len(),
                rows: if cols == 0 { 0 } else { data.len() / cols },
            });
        }
        check_unique(&ids)?;
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self {
            ids,
            data,
            cols,
            source,
        })
    }

    pub fn from_rows(
        ids: Vec<String>,
        rows: &[Vec<f32>],
        source: SourceTag,
    ) -> Result<Self, StoreError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(ids, data, cols, source)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Map from ID to row index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Index of the first row whose norm is below [`MIN_ROW_NORM`].
    pub fn first_zero_row(&self) -> Option<usize> {
        (0..self.rows()).find(|&i| row_norm(self.row(i)) < MIN_ROW_NORM)
    }

    /// Widens the selected rows to `f64`.
    pub fn gather_f64(&self, rows: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            out.extend(self.row(r).iter().map(|&x| f64::from(x)));
        }
        Matrix::from_vec(rows.len(), self.cols, out)
    }

    /// All rows widened to `f64`.
    pub fn to_f64(&self) -> Matrix {
        Matrix::from_vec(
            self.rows(),
            self.cols,
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
    }
}

fn check_unique(ids: &[String]) -> Result<(), StoreError> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Scales every row to unit L2 norm. Norms are computed in `f64`.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, StoreError> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows() {
        let row = m.row(i);
        let norm = row_norm(row);
        if norm < MIN_ROW_NORM {
            return Err(StoreError::ZeroRow(i));
        }
        data.extend(row.iter().map(|&x| (f64::from(x) / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        ids: m.ids.clone(),
        data,
        cols: m.cols,
        source: m.source,
    })
}
