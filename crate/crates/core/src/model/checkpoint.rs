//! Versioned binary checkpoint.
//!
//! ```text
//! magic "TALM" | version u32 | d_native u64 | d_english u64 | hidden u64
//! flags u8 (bit 0: concat_from_normalized) | dropout_p f64 | bn_eps f64 | count u32
//! count x { name_len u32 | name | rows u64 | cols u64 | rows*cols f32 }
//! ```
//! All integers little-endian. Values are stored as `f32`.

use std::collections::HashMap;
use std::path::Path;

use super::{
    BranchEncoderParams, ConcatEncoderParams, FusionParams, ModelConfig, ModelError, ModelParams,
};
use crate::fsutil::write_atomic;
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"TALM";
const VERSION: u32 = 1;

struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn branch_tensors<'a>(name: &str, b: &'a BranchEncoderParams, out: &mut Vec<(String, usize, usize, &'a [f64])>) {
    let h = b.hidden();
    out.push((format!("{name}.w1"), b.w1.rows(), h, b.w1.as_slice()));
    out.push((format!("{name}.b1"), 1, h, &b.b1));
    out.push((format!("{name}.bn_gamma"), 1, h, &b.bn_gamma));
    out.push((format!("{name}.bn_beta"), 1, h, &b.bn_beta));
    out.push((format!("{name}.bn_running_mean"), 1, h, &b.bn_running_mean));
    out.push((format!("{name}.bn_running_var"), 1, h, &b.bn_running_var));
    out.push((format!("{name}.w2"), h, h, b.w2.as_slice()));
    out.push((format!("{name}.b2"), 1, h, &b.b2));
}

fn concat_tensors<'a>(name: &str, c: &'a ConcatEncoderParams, out: &mut Vec<(String, usize, usize, &'a [f64])>) {
    out.push((format!("{name}.w1"), c.w1.rows(), c.w1.cols(), c.w1.as_slice()));
    out.push((format!("{name}.b1"), 1, c.b1.len(), &c.b1));
    out.push((format!("{name}.w2"), c.w2.rows(), c.w2.cols(), c.w2.as_slice()));
    out.push((format!("{name}.b2"), 1, c.b2.len(), &c.b2));
}

pub fn encode_checkpoint(m: &ModelParams) -> Vec<u8> {
    let cfg = m.config();
    let mut tensors = Vec::new();
    branch_tensors("post_native", &m.post_native, &mut tensors);
    branch_tensors("post_english", &m.post_english, &mut tensors);
    branch_tensors("fact_native", &m.fact_native, &mut tensors);
    branch_tensors("fact_english", &m.fact_english, &mut tensors);
    concat_tensors("post_concat", &m.post_concat, &mut tensors);
    concat_tensors("fact_concat", &m.fact_concat, &mut tensors);
    tensors.push(("fusion.lambda".into(), 1, 3, &m.fusion.lambda));
    tensors.push(("fusion.log_scale".into(), 1, 3, &m.fusion.log_scale));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [cfg.d_native, cfg.d_english, cfg.hidden] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(u8::from(cfg.concat_from_normalized));
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    out.extend_from_slice(&m.post_native.bn_eps.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, rows, cols, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for &x in data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(m: &ModelParams, path: &Path) -> Result<(), ModelError> {
    write_atomic(path, &encode_checkpoint(m))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d_native = c.u64()? as usize;
    let d_english = c.u64()? as usize;
    let hidden = c.u64()? as usize;
    let flags = c.take(1)?[0];
    let dropout_p = f64::from_bits(c.u64()?);
    let bn_eps = f64::from_bits(c.u64()?);
    let count = c.u32()?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| bad(format!("tensor {name} too large")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from(c.f32()?));
        }
        tensors.insert(name, Tensor { rows, cols, data });
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }

    let cfg = ModelConfig {
        d_native,
        d_english,
        hidden,
        dropout_p,
        concat_from_normalized: flags & 1 == 1,
    };
    let mut take = |name: String, rows: usize, cols: usize| -> Result<Vec<f64>, ModelError> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(bad(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        Ok(t.data)
    };
    let mut branch = |name: &str, d_in: usize| -> Result<BranchEncoderParams, ModelError> {
        let h = hidden;
        Ok(BranchEncoderParams {
            w1: Matrix::from_vec(d_in, h, take(format!("{name}.w1"), d_in, h)?),
            b1: take(format!("{name}.b1"), 1, h)?,
            bn_gamma: take(format!("{name}.bn_gamma"), 1, h)?,
            bn_beta: take(format!("{name}.bn_beta"), 1, h)?,
            bn_running_mean: take(format!("{name}.bn_running_mean"), 1, h)?,
            bn_running_var: take(format!("{name}.bn_running_var"), 1, h)?,
            w2: Matrix::from_vec(h, h, take(format!("{name}.w2"), h, h)?),
            b2: take(format!("{name}.b2"), 1, h)?,
            bn_eps,
            dropout_p: cfg.dropout_p,
        })
    };
    let post_native = branch("post_native", d_native)?;
    let post_english = branch("post_english", d_english)?;
    let fact_native = branch("fact_native", d_native)?;
    let fact_english = branch("fact_english", d_english)?;
    let mut concat = |name: &str| -> Result<ConcatEncoderParams, ModelError> {
        let h = hidden;
        Ok(ConcatEncoderParams {
            w1: Matrix::from_vec(2 * h, h, take(format!("{name}.w1"), 2 * h, h)?),
            b1: take(format!("{name}.b1"), 1, h)?,
            w2: Matrix::from_vec(h, h, take(format!("{name}.w2"), h, h)?),
            b2: take(format!("{name}.b2"), 1, h)?,
        })
    };
    let post_concat = concat("post_concat")?;
    let fact_concat = concat("fact_concat")?;
    let lambda: [f64; 3] = take("fusion.lambda".into(), 1, 3)?.try_into().unwrap();
    let log_scale: [f64; 3] = take("fusion.log_scale".into(), 1, 3)?.try_into().unwrap();
    let model = ModelParams {
        post_native,
        post_english,
        fact_native,
        fact_english,
        post_concat,
        fact_concat,
        fusion: FusionParams { lambda, log_scale },
        concat_from_normalized: cfg.concat_from_normalized,
    };
    if !model.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    if [&model.post_native, &model.post_english, &model.fact_native, &model.fact_english]
        .iter()
        .any(|b| b.bn_running_var.iter().any(|&v| v <= 0.0))
    {
        return Err(bad("batch-norm running variance must be positive"));
    }
    Ok(model)
}
