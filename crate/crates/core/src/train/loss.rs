//! Symmetric contrastive loss over a square score matrix and the optional hinge term.

use super::TrainError;
use crate::linalg::Matrix;

/// Contrastive and margin parts of one batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub margin: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, margin: f64, margin_weight: f64) -> Self {
        Self {
            contrastive,
            margin,
            total: contrastive + margin_weight * margin,
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of the diagonal under row-wise (`P`) and
/// column-wise (`Q`) softmax, and its exact gradient
/// `((P - I) + (Q - I)) / 2N`.
pub fn symmetric_contrastive_loss(x: &Matrix) -> Result<(f64, Matrix), TrainError> {
    let n = x.rows();
    if x.cols() != n {
        return Err(TrainError::NotSquare {
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, 0)));
    }
    if !x.is_finite() {
        return Err(TrainError::NonFiniteScores);
    }
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(x.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(move |i| x.get(i, j))))
        .collect();

    let mut loss = 0.0;
    for i in 0..n {
        let d = x.get(i, i);
        loss -= (d - row_lse[i]) + (d - col_lse[i]);
    }
    let scale = 1.0 / (2.0 * n as f64);
    loss *= scale;

    let grad = Matrix::from_fn(n, n, |i, j| {
        let v = x.get(i, j);
        let p = (v - row_lse[i]).exp();
        let q = (v - col_lse[j]).exp();
        let delta = if i == j { 2.0 } else { 0.0 };
        scale * (p + q - delta)
    });
    Ok((loss, grad))
}

/// Mean hinge `max(0, margin - X[i][i] + X[i][j])` over every listed
/// negative `j` of every row `i`, with its subgradient (zero at the corner).
pub fn margin_loss(
    x: &Matrix,
    negatives: &[Vec<usize>],
    margin: f64,
) -> Result<(f64, Matrix), TrainError> {
    let n = x.rows();
    if x.cols() != n {
        return Err(TrainError::NotSquare {
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    if negatives.len() > n {
        return Err(TrainError::NegativeOutOfRange {
            row: negatives.len() - 1,
            index: 0,
        });
    }
    let mut count = 0usize;
    for (i, negs) in negatives.iter().enumerate() {
        for &j in negs {
            if j == i {
                return Err(TrainError::NegativeIsPositive { row: i });
            }
            if j >= n {
                return Err(TrainError::NegativeOutOfRange { row: i, index: j });
            }
            count += 1;
        }
    }
    let mut grad = Matrix::zeros(n, n);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let w = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, negs) in negatives.iter().enumerate() {
        for &j in negs {
            let h = margin - x.get(i, i) + x.get(i, j);
            if h > 0.0 {
                loss += h;
                grad.set(i, j, grad.get(i, j) + w);
                grad.set(i, i, grad.get(i, i) - w);
            }
        }
    }
    Ok((loss * w, grad))
}
