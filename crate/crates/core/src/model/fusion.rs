//! The three cosine-similarity matrices and their weighted, scaled fusion.

use super::ModelError;
use crate::linalg::Matrix;

/// Initial log-scale, `ln(1/0.07)`.
pub fn initial_log_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Branch weights `lambda` and log-scales `s`. Index 0 is the concat
/// branch, 1 English, 2 native.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub lambda: [f64; 3],
    pub log_scale: [f64; 3],
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            lambda: [1.0; 3],
            log_scale: [initial_log_scale(); 3],
        }
    }
}

impl FusionParams {
    /// `lambda_k * exp(s_k)` for each branch. An overflowing exponent is an error.
    pub fn coefficients(&self) -> Result<[f64; 3], ModelError> {
        let mut c = [0.0; 3];
        for k in 0..3 {
            if !self.lambda[k].is_finite() || !self.log_scale[k].is_finite() {
                return Err(ModelError::NonFiniteFusion);
            }
            let e = self.log_scale[k].exp();
            if !e.is_finite() {
                return Err(ModelError::ScaleOverflow { branch: k });
            }
            c[k] = self.lambda[k] * e;
        }
        Ok(c)
    }
}

/// `A` (concat space), `B` (English), `C` (native); each `Nf x Np`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTriple {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

/// Six unit-norm embedding sets for one side (facts or posts).
#[derive(Debug, Clone, PartialEq)]
pub struct SideEmbeddings {
    pub native: Matrix,
    pub english: Matrix,
    pub concat: Matrix,
}

impl SideEmbeddings {
    pub fn len(&self) -> usize {
        self.native.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, start: usize, end: usize) -> SideEmbeddings {
        SideEmbeddings {
            native: self.native.row_range(start, end),
            english: self.english.row_range(start, end),
            concat: self.concat.row_range(start, end),
        }
    }
}

/// Cosine matrices between unit-norm fact and post embeddings.
pub fn similarity_triple(
    facts: &SideEmbeddings,
    posts: &SideEmbeddings,
) -> Result<SimilarityTriple, ModelError> {
    for (what, f, p) in [
        ("concat width", &facts.concat, &posts.concat),
        ("english width", &facts.english, &posts.english),
        ("native width", &facts.native, &posts.native),
    ] {
        if f.cols() != p.cols() {
            return Err(ModelError::ShapeMismatch {
                what,
                expected: f.cols(),
                found: p.cols(),
            });
        }
    }
    Ok(SimilarityTriple {
        a: facts.concat.matmul_t(&posts.concat),
        b: facts.english.matmul_t(&posts.english),
        c: facts.native.matmul_t(&posts.native),
    })
}

/// `x = l1 e^s1 A + l2 e^s2 B + l3 e^s3 C`, elementwise.
pub fn fuse_scores(triple: &SimilarityTriple, fusion: &FusionParams) -> Result<Matrix, ModelError> {
    let shape = triple.a.shape();
    if triple.b.shape() != shape || triple.c.shape() != shape {
        return Err(ModelError::ShapeMismatch {
            what: "similarity matrices",
            expected: shape.0 * shape.1,
            found: triple.b.rows() * triple.b.cols(),
        });
    }
    let [c1, c2, c3] = fusion.coefficients()?;
    let data: Vec<f64> = triple
        .a
        .as_slice()
        .iter()
        .zip(triple.b.as_slice())
        .zip(triple.c.as_slice())
        .map(|((&a, &b), &c)| c1 * a + c2 * b + c3 * c)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFiniteScores);
    }
    Ok(Matrix::from_vec(shape.0, shape.1, data))
}
