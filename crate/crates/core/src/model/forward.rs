use rayon::prelude::*;

use super::{
    encoder::{BranchCache, ConcatCache, DropoutKey},
    fuse_scores, similarity_triple, Mode, ModelError, ModelParams, SideEmbeddings,
    SimilarityTriple,
};
use crate::linalg::{blocks, Matrix};
use crate::store::MIN_ROW_NORM;

/// Which tower a batch goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Fact,
    Post,
}

/// Native and English input embeddings for the same rows.
#[derive(Debug, Clone, Copy)]
pub struct SideInputs<'a> {
    pub native: &'a Matrix,
    pub english: &'a Matrix,
}

/// Dropout layer ids: post native/english, fact native/english.
fn layer_ids(side: Side) -> (u64, u64) {
    match side {
        Side::Post => (0, 1),
        Side::Fact => (2, 3),
    }
}

/// Unit-normalizes every row; returns the normalized matrix and the original norms.
pub fn normalize_rows(m: &Matrix, what: &'static str) -> Result<(Matrix, Vec<f64>), ModelError> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n >= MIN_ROW_NORM) {
            return Err(ModelError::ZeroNorm { what, row: i });
        }
        for x in row.iter_mut() {
            *x /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// `dL/dv = (I - v_hat v_hat^T) dL/dv_hat / ||v||`, row by row.
pub fn normalize_rows_backward(normed: &Matrix, norms: &[f64], d_normed: &Matrix) -> Matrix {
    let mut out = d_normed.clone();
    for i in 0..normed.rows() {
        let v = normed.row(i);
        let g = d_normed.row(i);
        let proj = crate::linalg::dot(v, g);
        for ((o, &vi), &gi) in out.row_mut(i).iter_mut().zip(v).zip(g) {
            *o = (gi - vi * proj) / norms[i];
        }
    }
    out
}

/// Everything one tower keeps for backprop.
#[derive(Debug, Clone)]
pub struct SideCache {
    pub native: BranchCache,
    pub english: BranchCache,
    pub concat: ConcatCache,
    pub normed: SideEmbeddings,
    /// Norms of the raw native, English and concat outputs.
    pub norms: [Vec<f64>; 3],
}

fn encode_with_cache(
    model: &ModelParams,
    side: Side,
    inputs: SideInputs<'_>,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<SideCache, ModelError> {
    let (native_enc, english_enc, concat_enc) = match side {
        Side::Post => (&model.post_native, &model.post_english, &model.post_concat),
        Side::Fact => (&model.fact_native, &model.fact_english, &model.fact_concat),
    };
    if inputs.native.rows() != inputs.english.rows() {
        return Err(ModelError::ShapeMismatch {
            what: "native/english row count",
            expected: inputs.native.rows(),
            found: inputs.english.rows(),
        });
    }
    let (ln, le) = layer_ids(side);
    let (n_raw, n_cache) = native_enc.forward(inputs.native, mode, DropoutKey::new(seed, ln, step))?;
    let (e_raw, e_cache) =
        english_enc.forward(inputs.english, mode, DropoutKey::new(seed, le, step))?;
    let (n_norm, n_norms) = normalize_rows(&n_raw, "native encoder output")?;
    let (e_norm, e_norms) = normalize_rows(&e_raw, "english encoder output")?;
    let (c_raw, c_cache) = if model.concat_from_normalized {
        concat_enc.forward(&n_norm, &e_norm)?
    } else {
        concat_enc.forward(&n_raw, &e_raw)?
    };
    let (c_norm, c_norms) = normalize_rows(&c_raw, "concat encoder output")?;
    Ok(SideCache {
        native: n_cache,
        english: e_cache,
        concat: c_cache,
        normed: SideEmbeddings {
            native: n_norm,
            english: e_norm,
            concat: c_norm,
        },
        norms: [n_norms, e_norms, c_norms],
    })
}

/// The six unit-norm embedding sets for a batch of facts and a batch of posts.
pub fn forward_embeddings(
    model: &ModelParams,
    facts: SideInputs<'_>,
    posts: SideInputs<'_>,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<(SideEmbeddings, SideEmbeddings), ModelError> {
    let f = encode_with_cache(model, Side::Fact, facts, mode, seed, step)?;
    let p = encode_with_cache(model, Side::Post, posts, mode, seed, step)?;
    Ok((f.normed, p.normed))
}

/// Activations from a full forward pass, needed by backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub facts: SideCache,
    pub posts: SideCache,
    pub triple: SimilarityTriple,
    pub coefficients: [f64; 3],
}

/// Forward pass producing the fused `Nf x Np` score matrix plus the cache for backprop.
pub fn forward_train(
    model: &ModelParams,
    facts: SideInputs<'_>,
    posts: SideInputs<'_>,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<(Matrix, ForwardCache), ModelError> {
    let f = encode_with_cache(model, Side::Fact, facts, mode, seed, step)?;
    let p = encode_with_cache(model, Side::Post, posts, mode, seed, step)?;
    let triple = similarity_triple(&f.normed, &p.normed)?;
    let x = fuse_scores(&triple, &model.fusion)?;
    let coefficients = model.fusion.coefficients()?;
    Ok((
        x,
        ForwardCache {
            facts: f,
            posts: p,
            triple,
            coefficients,
        },
    ))
}

/// Eval-mode encoding of one side, `block` rows at a time.
pub fn encode_side(
    model: &ModelParams,
    side: Side,
    inputs: SideInputs<'_>,
    block: usize,
) -> Result<SideEmbeddings, ModelError> {
    if block == 0 {
        return Err(ModelError::InvalidBlockSize);
    }
    let n = inputs.native.rows();
    let parts: Vec<SideEmbeddings> = blocks(n, block)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(s, e)| {
            let native = inputs.native.row_range(s, e);
            let english = inputs.english.row_range(s, e);
            encode_with_cache(
                model,
                side,
                SideInputs {
                    native: &native,
                    english: &english,
                },
                Mode::Eval,
                0,
                0,
            )
            .map(|c| c.normed)
        })
        .collect::<Result<_, _>>()?;
    let h = model.post_native.hidden();
    let mut native = Vec::with_capacity(n * h);
    let mut english = Vec::with_capacity(n * h);
    let mut concat = Vec::with_capacity(n * h);
    for p in parts {
        native.extend(p.native.into_vec());
        english.extend(p.english.into_vec());
        concat.extend(p.concat.into_vec());
    }
    Ok(SideEmbeddings {
        native: Matrix::from_vec(n, h, native),
        english: Matrix::from_vec(n, h, english),
        concat: Matrix::from_vec(n, h, concat),
    })
}

/// Fused scores for fact rows `facts_range` against post rows `posts_range`.
pub fn score_tile(
    model: &ModelParams,
    facts: &SideEmbeddings,
    posts: &SideEmbeddings,
    facts_range: (usize, usize),
    posts_range: (usize, usize),
) -> Result<Matrix, ModelError> {
    let f = facts.rows(facts_range.0, facts_range.1);
    let p = posts.rows(posts_range.0, posts_range.1);
    fuse_scores(&similarity_triple(&f, &p)?, &model.fusion)
}

/// Monolithic eval-mode `Nf x Np` fused score matrix.
pub fn score_matrix(
    model: &ModelParams,
    facts: SideInputs<'_>,
    posts: SideInputs<'_>,
) -> Result<Matrix, ModelError> {
    let (f, p) = forward_embeddings(model, facts, posts, Mode::Eval, 0, 0)?;
    fuse_scores(&similarity_triple(&f, &p)?, &model.fusion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTile {
    pub fact_start: usize,
    pub post_start: usize,
    pub scores: Matrix,
}

/// Fused scores computed tile by tile. Tiles are disjoint and computed in parallel.
pub fn blockwise_scores(
    model: &ModelParams,
    facts: SideInputs<'_>,
    posts: SideInputs<'_>,
    fact_block: usize,
    post_block: usize,
) -> Result<Vec<ScoreTile>, ModelError> {
    if fact_block == 0 || post_block == 0 {
        return Err(ModelError::InvalidBlockSize);
    }
    let f = encode_side(model, Side::Fact, facts, fact_block)?;
    let p = encode_side(model, Side::Post, posts, post_block)?;
    let coords: Vec<_> = blocks(f.len(), fact_block)
        .flat_map(|fr| blocks(p.len(), post_block).map(move |pr| (fr, pr)))
        .collect();
    coords
        .into_par_iter()
        .map(|(fr, pr)| {
            Ok(ScoreTile {
                fact_start: fr.0,
                post_start: pr.0,
                scores: score_tile(model, &f, &p, fr, pr)?,
            })
        })
        .collect()
}

/// Stitches tiles back into one `n_facts x n_posts` matrix.
pub fn assemble_tiles(n_facts: usize, n_posts: usize, tiles: &[ScoreTile]) -> Matrix {
    let mut out = Matrix::zeros(n_facts, n_posts);
    for t in tiles {
        for i in 0..t.scores.rows() {
            for j in 0..t.scores.cols() {
                out.set(t.fact_start + i, t.post_start + j, t.scores.get(i, j));
            }
        }
    }
    out
}
