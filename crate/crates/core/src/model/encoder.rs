//! Branch encoders (Linear -> BatchNorm -> ReLU -> Dropout -> Linear) and
//! concat encoders (Linear -> ReLU -> Linear), with cached activations for backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, ModelError};
use crate::linalg::Matrix;

pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Identifies one dropout draw: the run seed, the layer, and the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, layer: u64, step: u64) -> Self {
        Self { seed, layer, step }
    }

    fn rng(self) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.layer.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h = splitmix64(h ^ self.step.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inverted-dropout multipliers (`0` or `1/(1-p)`) for an `rows x cols` activation.
pub fn dropout_mask(key: DropoutKey, rows: usize, cols: usize, p: f64) -> Vec<f64> {
    let mut rng = key.rng();
    let keep = 1.0 / (1.0 - p);
    (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

pub(crate) fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchEncoderParams {
    /// `D_in x H`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    /// `H x H`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bn_eps: f64,
    pub dropout_p: f64,
}

/// Activations kept from a branch forward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    input: Matrix,
    /// Normalized pre-activations (`x_hat`).
    x_hat: Matrix,
    inv_std: Vec<f64>,
    /// BatchNorm output, before ReLU.
    bn_out: Matrix,
    dropout: Option<Vec<f64>>,
    hidden: Matrix,
    batch_mean: Option<Vec<f64>>,
    batch_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl BranchEncoderParams {
    /// Kaiming-style uniform init with bound `1/sqrt(fan_in)`; BatchNorm starts as identity.
    pub fn init(d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let b_in = 1.0 / (d_in as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: uniform_matrix(rng, d_in, hidden, b_in),
            b1: uniform_vec(rng, hidden, b_in),
            bn_gamma: vec![1.0; hidden],
            bn_beta: vec![0.0; hidden],
            bn_running_mean: vec![0.0; hidden],
            bn_running_var: vec![1.0; hidden],
            w2: uniform_matrix(rng, hidden, hidden, b_h),
            b2: uniform_vec(rng, hidden, b_h),
            bn_eps: DEFAULT_BN_EPS,
            dropout_p: DEFAULT_DROPOUT,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        key: DropoutKey,
    ) -> Result<(Matrix, BranchCache), ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::ShapeMismatch {
                what: "branch input width",
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let m = x.rows();
        let h = self.hidden();
        if mode == Mode::Train && m < 2 {
            return Err(ModelError::TrainBatchTooSmall { rows: m });
        }

        let mut z = x.matmul(&self.w1);
        z.add_row_vector(&self.b1);

        let (mean, var, batch_mean, batch_var) = match mode {
            Mode::Train => {
                let mut mean = z.sum_rows();
                for v in &mut mean {
                    *v /= m as f64;
                }
                let mut var = vec![0.0; h];
                for i in 0..m {
                    for ((acc, &zi), mu) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                        *acc += (zi - mu) * (zi - mu);
                    }
                }
                for v in &mut var {
                    *v /= m as f64;
                }
                (mean.clone(), var.clone(), Some(mean), Some(var))
            }
            Mode::Eval => (
                self.bn_running_mean.clone(),
                self.bn_running_var.clone(),
                None,
                None,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();
        let x_hat = Matrix::from_fn(m, h, |i, j| (z.get(i, j) - mean[j]) * inv_std[j]);
        let bn_out = Matrix::from_fn(m, h, |i, j| {
            self.bn_gamma[j] * x_hat.get(i, j) + self.bn_beta[j]
        });

        let dropout = match mode {
            Mode::Train if self.dropout_p > 0.0 => Some(dropout_mask(key, m, h, self.dropout_p)),
            _ => None,
        };
        let mut hidden = bn_out.map(|v| v.max(0.0));
        if let Some(mask) = &dropout {
            for (v, s) in hidden.as_mut_slice().iter_mut().zip(mask) {
                *v *= s;
            }
        }

        let mut out = hidden.matmul(&self.w2);
        out.add_row_vector(&self.b2);
        if !out.is_finite() {
            return Err(ModelError::NonFiniteOutput("branch encoder"));
        }
        Ok((
            out,
            BranchCache {
                input: x.clone(),
                x_hat,
                inv_std,
                bn_out,
                dropout,
                hidden,
                batch_mean,
                batch_var,
            },
        ))
    }

    /// Gradients of all trainable tensors given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &BranchCache, d_out: &Matrix) -> BranchGrads {
        let m = cache.input.rows();
        let h = self.hidden();
        let w2 = cache.hidden.t_matmul(d_out);
        let b2 = d_out.sum_rows();
        let mut d_hidden = d_out.matmul_t(&self.w2);
        if let Some(mask) = &cache.dropout {
            for (v, s) in d_hidden.as_mut_slice().iter_mut().zip(mask) {
                *v *= s;
            }
        }
        // ReLU
        for (g, &y) in d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(cache.bn_out.as_slice())
        {
            if y <= 0.0 {
                *g = 0.0;
            }
        }
        let d_bn = d_hidden;

        let mut bn_gamma = vec![0.0; h];
        let bn_beta = d_bn.sum_rows();
        for i in 0..m {
            for j in 0..h {
                bn_gamma[j] += d_bn.get(i, j) * cache.x_hat.get(i, j);
            }
        }
        let d_xhat = Matrix::from_fn(m, h, |i, j| d_bn.get(i, j) * self.bn_gamma[j]);
        let d_z = if cache.batch_mean.is_some() {
            let sum_dx = d_xhat.sum_rows();
            let mut sum_dx_xhat = vec![0.0; h];
            for i in 0..m {
                for j in 0..h {
                    sum_dx_xhat[j] += d_xhat.get(i, j) * cache.x_hat.get(i, j);
                }
            }
            let mf = m as f64;
            Matrix::from_fn(m, h, |i, j| {
                cache.inv_std[j] / mf
                    * (mf * d_xhat.get(i, j) - sum_dx[j] - cache.x_hat.get(i, j) * sum_dx_xhat[j])
            })
        } else {
            Matrix::from_fn(m, h, |i, j| d_xhat.get(i, j) * cache.inv_std[j])
        };

        BranchGrads {
            w1: cache.input.t_matmul(&d_z),
            b1: d_z.sum_rows(),
            bn_gamma,
            bn_beta,
            w2,
            b2,
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    /// Uses the unbiased batch variance, as PyTorch does.
    pub fn update_running_stats(&mut self, cache: &BranchCache) {
        let (Some(mean), Some(var)) = (&cache.batch_mean, &cache.batch_var) else {
            return;
        };
        let m = cache.input.rows() as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for j in 0..self.hidden() {
            self.bn_running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.bn_running_mean[j] + BN_MOMENTUM * mean[j];
            self.bn_running_var[j] =
                (1.0 - BN_MOMENTUM) * self.bn_running_var[j] + BN_MOMENTUM * var[j] * unbias;
        }
    }
}

impl BranchGrads {
    pub fn zeros_like(p: &BranchEncoderParams) -> Self {
        let h = p.hidden();
        Self {
            w1: Matrix::zeros(p.input_dim(), h),
            b1: vec![0.0; h],
            bn_gamma: vec![0.0; h],
            bn_beta: vec![0.0; h],
            w2: Matrix::zeros(h, h),
            b2: vec![0.0; h],
        }
    }
}

/// Encodes one batch through a branch encoder.
pub fn encode_branch(
    params: &BranchEncoderParams,
    batch: &Matrix,
    mode: Mode,
    key: DropoutKey,
) -> Result<Matrix, ModelError> {
    params.forward(batch, mode, key).map(|(out, _)| out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatEncoderParams {
    /// `2H x H`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `H x H`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConcatCache {
    input: Matrix,
    pre_relu: Matrix,
    hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ConcatGrads {
    pub fn zeros_like(p: &ConcatEncoderParams) -> Self {
        Self {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }
}

impl ConcatEncoderParams {
    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let b_in = 1.0 / ((2 * hidden) as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: uniform_matrix(rng, 2 * hidden, hidden, b_in),
            b1: uniform_vec(rng, hidden, b_in),
            w2: uniform_matrix(rng, hidden, hidden, b_h),
            b2: uniform_vec(rng, hidden, b_h),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w2.cols()
    }

    /// `W2 . ReLU(W1 . [native || english] + b1) + b2`
    pub fn forward(
        &self,
        native: &Matrix,
        english: &Matrix,
    ) -> Result<(Matrix, ConcatCache), ModelError> {
        if native.shape() != english.shape() {
            return Err(ModelError::ShapeMismatch {
                what: "concat inputs",
                expected: native.cols(),
                found: english.cols(),
            });
        }
        if native.cols() * 2 != self.w1.rows() {
            return Err(ModelError::ShapeMismatch {
                what: "concat input width",
                expected: self.w1.rows(),
                found: native.cols() * 2,
            });
        }
        let input = native.hconcat(english);
        let mut pre_relu = input.matmul(&self.w1);
        pre_relu.add_row_vector(&self.b1);
        let hidden = pre_relu.map(|v| v.max(0.0));
        let mut out = hidden.matmul(&self.w2);
        out.add_row_vector(&self.b2);
        if !out.is_finite() {
            return Err(ModelError::NonFiniteOutput("concat encoder"));
        }
        Ok((
            out,
            ConcatCache {
                input,
                pre_relu,
                hidden,
            },
        ))
    }

    /// Returns parameter gradients and `(d_native, d_english)`.
    pub fn backward(&self, cache: &ConcatCache, d_out: &Matrix) -> (ConcatGrads, Matrix, Matrix) {
        let w2 = cache.hidden.t_matmul(d_out);
        let b2 = d_out.sum_rows();
        let mut d_pre = d_out.matmul_t(&self.w2);
        for (g, &z) in d_pre
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_relu.as_slice())
        {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let w1 = cache.input.t_matmul(&d_pre);
        let b1 = d_pre.sum_rows();
        let d_in = d_pre.matmul_t(&self.w1);
        let (d_native, d_english) = d_in.hsplit(self.w1.rows() / 2);
        (ConcatGrads { w1, b1, w2, b2 }, d_native, d_english)
    }
}

/// Encodes a pair of branch outputs through a concat encoder.
pub fn encode_concat(
    params: &ConcatEncoderParams,
    native_out: &Matrix,
    english_out: &Matrix,
) -> Result<Matrix, ModelError> {
    params.forward(native_out, english_out).map(|(o, _)| o)
}
