//! Forward pass: four branch encoders, two concat encoders, row
//! normalization, the `A`/`B`/`C` cosine matrices and their fusion.

mod checkpoint;
mod encoder;
mod forward;
mod fusion;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use encoder::{
    dropout_mask, encode_branch, encode_concat, BranchCache, BranchEncoderParams, BranchGrads,
    ConcatCache, ConcatEncoderParams, ConcatGrads, DropoutKey, BN_MOMENTUM, DEFAULT_BN_EPS,
    DEFAULT_DROPOUT,
};
pub use forward::{
    assemble_tiles, blockwise_scores, encode_side, forward_embeddings, forward_train,
    normalize_rows, normalize_rows_backward, score_matrix, score_tile, ForwardCache, ScoreTile,
    Side, SideCache, SideInputs,
};
pub use fusion::{
    fuse_scores, initial_log_scale, similarity_triple, FusionParams, SideEmbeddings,
    SimilarityTriple,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("train-mode batch needs at least 2 rows for batch statistics, got {rows}")]
    TrainBatchTooSmall { rows: usize },
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite output from {0}")]
    NonFiniteOutput(&'static str),
    #[error("exp(log_scale) overflows for fusion branch {branch}")]
    ScaleOverflow { branch: usize },
    #[error("fusion parameters are not finite")]
    NonFiniteFusion,
    #[error("fused scores are not finite")]
    NonFiniteScores,
    #[error("row {row} of {what} has near-zero norm")]
    ZeroNorm { what: &'static str, row: usize },
    #[error("block sizes must be at least 1")]
    InvalidBlockSize,
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Train mode uses batch statistics and dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_native: usize,
    pub d_english: usize,
    pub hidden: usize,
    pub dropout_p: f64,
    /// Feed the normalized branch outputs (rather than the raw ones) to the concat encoders.
    pub concat_from_normalized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_native: 1024,
            d_english: 1024,
            hidden: 256,
            dropout_p: DEFAULT_DROPOUT,
            concat_from_normalized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub post_native: BranchEncoderParams,
    pub post_english: BranchEncoderParams,
    pub fact_native: BranchEncoderParams,
    pub fact_english: BranchEncoderParams,
    pub post_concat: ConcatEncoderParams,
    pub fact_concat: ConcatEncoderParams,
    pub fusion: FusionParams,
    pub concat_from_normalized: bool,
}

/// Per-tensor gradients, laid out like the trainable part of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub post_native: BranchGrads,
    pub post_english: BranchGrads,
    pub fact_native: BranchGrads,
    pub fact_english: BranchGrads,
    pub post_concat: ConcatGrads,
    pub fact_concat: ConcatGrads,
    pub lambda: [f64; 3],
    pub log_scale: [f64; 3],
}

const BRANCH_NAMES: [&str; 4] = ["post_native", "post_english", "fact_native", "fact_english"];
const CONCAT_NAMES: [&str; 2] = ["post_concat", "fact_concat"];

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branch = |d| {
            let mut p = BranchEncoderParams::init(d, config.hidden, &mut rng);
            p.dropout_p = config.dropout_p;
            p
        };
        let post_native = branch(config.d_native);
        let post_english = branch(config.d_english);
        let fact_native = branch(config.d_native);
        let fact_english = branch(config.d_english);
        Self {
            post_native,
            post_english,
            fact_native,
            fact_english,
            post_concat: ConcatEncoderParams::init(config.hidden, &mut rng),
            fact_concat: ConcatEncoderParams::init(config.hidden, &mut rng),
            fusion: FusionParams::default(),
            concat_from_normalized: config.concat_from_normalized,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            d_native: self.post_native.input_dim(),
            d_english: self.post_english.input_dim(),
            hidden: self.post_native.hidden(),
            dropout_p: self.post_native.dropout_p,
            concat_from_normalized: self.concat_from_normalized,
        }
    }

    fn branches(&self) -> [&BranchEncoderParams; 4] {
        [
            &self.post_native,
            &self.post_english,
            &self.fact_native,
            &self.fact_english,
        ]
    }

    fn branches_mut(&mut self) -> [&mut BranchEncoderParams; 4] {
        [
            &mut self.post_native,
            &mut self.post_english,
            &mut self.fact_native,
            &mut self.fact_english,
        ]
    }

    /// Visits every trainable tensor in a fixed order shared with [`Gradients::visit`].
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let [pn, pe, fnat, fe] = self.branches_mut();
        for (name, b) in BRANCH_NAMES.iter().zip([pn, pe, fnat, fe]) {
            f(&format!("{name}.w1"), b.w1.as_mut_slice());
            f(&format!("{name}.b1"), &mut b.b1);
            f(&format!("{name}.bn_gamma"), &mut b.bn_gamma);
            f(&format!("{name}.bn_beta"), &mut b.bn_beta);
            f(&format!("{name}.w2"), b.w2.as_mut_slice());
            f(&format!("{name}.b2"), &mut b.b2);
        }
        for (name, c) in CONCAT_NAMES
            .iter()
            .zip([&mut self.post_concat, &mut self.fact_concat])
        {
            f(&format!("{name}.w1"), c.w1.as_mut_slice());
            f(&format!("{name}.b1"), &mut c.b1);
            f(&format!("{name}.w2"), c.w2.as_mut_slice());
            f(&format!("{name}.b2"), &mut c.b2);
        }
        f("fusion.lambda", &mut self.fusion.lambda);
        f("fusion.log_scale", &mut self.fusion.log_scale);
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&mut self) -> usize {
        let mut n = 0;
        self.visit_trainable_mut(&mut |_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let branch_ok = self.branches().iter().all(|b| {
            b.w1.is_finite()
                && b.w2.is_finite()
                && [&b.b1, &b.b2, &b.bn_gamma, &b.bn_beta, &b.bn_running_mean, &b.bn_running_var]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
        });
        let concat_ok = [&self.post_concat, &self.fact_concat].iter().all(|c| {
            c.w1.is_finite()
                && c.w2.is_finite()
                && c.b1.iter().chain(&c.b2).all(|x| x.is_finite())
        });
        branch_ok
            && concat_ok
            && self
                .fusion
                .lambda
                .iter()
                .chain(&self.fusion.log_scale)
                .all(|x| x.is_finite())
    }
}

impl Gradients {
    pub fn zeros_like(m: &ModelParams) -> Self {
        Self {
            post_native: BranchGrads::zeros_like(&m.post_native),
            post_english: BranchGrads::zeros_like(&m.post_english),
            fact_native: BranchGrads::zeros_like(&m.fact_native),
            fact_english: BranchGrads::zeros_like(&m.fact_english),
            post_concat: ConcatGrads::zeros_like(&m.post_concat),
            fact_concat: ConcatGrads::zeros_like(&m.fact_concat),
            lambda: [0.0; 3],
            log_scale: [0.0; 3],
        }
    }

    /// Same order as [`ModelParams::visit_trainable_mut`].
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, b) in BRANCH_NAMES.iter().zip([
            &self.post_native,
            &self.post_english,
            &self.fact_native,
            &self.fact_english,
        ]) {
            f(&format!("{name}.w1"), b.w1.as_slice());
            f(&format!("{name}.b1"), &b.b1);
            f(&format!("{name}.bn_gamma"), &b.bn_gamma);
            f(&format!("{name}.bn_beta"), &b.bn_beta);
            f(&format!("{name}.w2"), b.w2.as_slice());
            f(&format!("{name}.b2"), &b.b2);
        }
        for (name, c) in CONCAT_NAMES.iter().zip([&self.post_concat, &self.fact_concat]) {
            f(&format!("{name}.w1"), c.w1.as_slice());
            f(&format!("{name}.b1"), &c.b1);
            f(&format!("{name}.w2"), c.w2.as_slice());
            f(&format!("{name}.b2"), &c.b2);
        }
        f("fusion.lambda", &self.lambda);
        f("fusion.log_scale", &self.log_scale);
    }

    /// All gradient entries flattened in visit order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}
