//! Exact gradients through fusion, cosine normalization, concat and branch encoders.

use super::TrainError;
use crate::linalg::Matrix;
use crate::model::{normalize_rows_backward, ForwardCache, Gradients, ModelParams, SideCache};

struct SideGrads {
    native: crate::model::BranchGrads,
    english: crate::model::BranchGrads,
    concat: crate::model::ConcatGrads,
}

fn side_backward(
    model: &ModelParams,
    is_post: bool,
    cache: &SideCache,
    d_native_n: Matrix,
    d_english_n: Matrix,
    d_concat_n: Matrix,
) -> SideGrads {
    let (native_enc, english_enc, concat_enc) = if is_post {
        (&model.post_native, &model.post_english, &model.post_concat)
    } else {
        (&model.fact_native, &model.fact_english, &model.fact_concat)
    };
    let d_concat_raw = normalize_rows_backward(&cache.normed.concat, &cache.norms[2], &d_concat_n);
    let (concat, d_cn, d_ce) = concat_enc.backward(&cache.concat, &d_concat_raw);

    let (d_native_raw, d_english_raw) = if model.concat_from_normalized {
        let mut dn = d_native_n;
        let mut de = d_english_n;
        dn.axpy(1.0, &d_cn);
        de.axpy(1.0, &d_ce);
        (
            normalize_rows_backward(&cache.normed.native, &cache.norms[0], &dn),
            normalize_rows_backward(&cache.normed.english, &cache.norms[1], &de),
        )
    } else {
        let mut dn = normalize_rows_backward(&cache.normed.native, &cache.norms[0], &d_native_n);
        let mut de =
            normalize_rows_backward(&cache.normed.english, &cache.norms[1], &d_english_n);
        dn.axpy(1.0, &d_cn);
        de.axpy(1.0, &d_ce);
        (dn, de)
    };
    SideGrads {
        native: native_enc.backward(&cache.native, &d_native_raw),
        english: english_enc.backward(&cache.english, &d_english_raw),
        concat,
    }
}

/// Backpropagates `d_x = dL/dX` (shape `Nf x Np`) to every trainable parameter.
pub fn backward(
    model: &ModelParams,
    cache: &ForwardCache,
    d_x: &Matrix,
) -> Result<Gradients, TrainError> {
    let t = &cache.triple;
    if d_x.shape() != t.a.shape() {
        return Err(TrainError::GradientShape {
            expected: t.a.shape(),
            found: d_x.shape(),
        });
    }
    let [c1, c2, c3] = cache.coefficients;
    let e_s: Vec<f64> = model.fusion.log_scale.iter().map(|s| s.exp()).collect();

    let mut lambda = [0.0; 3];
    let mut log_scale = [0.0; 3];
    for (k, m) in [&t.a, &t.b, &t.c].into_iter().enumerate() {
        let g: f64 = crate::linalg::dot(d_x.as_slice(), m.as_slice());
        lambda[k] = g * e_s[k];
        log_scale[k] = g * model.fusion.lambda[k] * e_s[k];
    }

    let f = &cache.facts.normed;
    let p = &cache.posts.normed;
    // X = sum_k c_k F_k P_k^T
    let d_fa = d_x.matmul(&p.concat).scale(c1);
    let d_pa = d_x.t_matmul(&f.concat).scale(c1);
    let d_fb = d_x.matmul(&p.english).scale(c2);
    let d_pb = d_x.t_matmul(&f.english).scale(c2);
    let d_fc = d_x.matmul(&p.native).scale(c3);
    let d_pc = d_x.t_matmul(&f.native).scale(c3);

    let fg = side_backward(model, false, &cache.facts, d_fc, d_fb, d_fa);
    let pg = side_backward(model, true, &cache.posts, d_pc, d_pb, d_pa);

    Ok(Gradients {
        post_native: pg.native,
        post_english: pg.english,
        fact_native: fg.native,
        fact_english: fg.english,
        post_concat: pg.concat,
        fact_concat: fg.concat,
        lambda,
        log_scale,
    })
}
