//! Little-endian binary embedding file.
//!
//! ```text
//! magic "TALN" | version u32 | source_tag u8 | dtype u8 | rows u64 | cols u64
//! payload: rows*cols f32, row-major
//! id table: count u64, then per id: byte_len u32 + UTF-8 bytes
//! ```

use std::path::Path;

use super::{check_unique, EmbeddingMatrix, SourceTag, StoreError};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"TALN";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8 + 8;
const DTYPE_F32: u8 = 0;

/// Serializes a matrix to bytes.
pub fn encode_matrix(m: &EmbeddingMatrix) -> Result<Vec<u8>, StoreError> {
    check_unique(m.ids())?;
    let id_bytes: usize = m.ids().iter().map(|s| 4 + s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * 4 + 8 + id_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(m.source().code());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(m.ids().len() as u64).to_le_bytes());
    for id in m.ids() {
        let len = u32::try_from(id.len()).map_err(|_| StoreError::Truncated("id too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(out)
}

/// Writes `m` to `path` atomically. Duplicate IDs are rejected before anything is written.
pub fn save_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<(), StoreError> {
    let bytes = encode_matrix(m)?;
    write_atomic(path, &bytes).map_err(|e| StoreError::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_matrix(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(StoreError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let source = SourceTag::from_code(r.u8("source tag")?)?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(dtype));
    }
    let rows = r.u64("rows")?;
    let cols = r.u64("cols")?;
    let overflow = StoreError::DimensionOverflow { rows, cols };
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or(overflow)?;
    if payload_len > r.remaining() {
        return Err(StoreError::DimensionOverflow { rows, cols });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let payload = r.take(payload_len, "payload")?;
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(StoreError::NonFiniteValue {
                row: k / cols,
                col: k % cols,
            });
        }
        data.push(x);
    }

    let count = r.u64("id count")?;
    if count != rows as u64 {
        return Err(StoreError::IdCountMismatch {
            ids: count as usize,
            rows,
        });
    }
    let mut ids = Vec::with_capacity(rows);
    for i in 0..rows {
        let len = r.u32("id length")? as usize;
        let raw = r.take(len, "id bytes")?;
        let s = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidUtf8(i))?;
        ids.push(s.to_owned());
    }
    if r.remaining() != 0 {
        return Err(StoreError::TrailingBytes(r.remaining()));
    }
    EmbeddingMatrix::new(ids, data, cols, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]],
            SourceTag::FactEnglish,
        )
        .unwrap()
    }

    #[test]
    fn smallest_valid_file_loads() {
        let bytes = encode_matrix(&tiny()).unwrap();
        let m = decode_matrix(&bytes).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 3);
        assert_eq!(m.ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(m.source(), SourceTag::FactEnglish);
    }

    #[test]
    fn degenerate_one_by_one_layout() {
        let m = EmbeddingMatrix::from_rows(vec!["x".into()], &[vec![0.0]], SourceTag::PostNative)
            .unwrap();
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(HEADER_LEN, 26);
        // header + one f32 + id count + (len prefix + "x")
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 8 + 4 + 1);
        assert_eq!(&bytes[..4], b"TALN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 0);
        assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut bytes = encode_matrix(&tiny()).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_matrix(&bytes),
            Err(StoreError::NonFiniteValue { row: 0, col: 0 })
        ));
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_matrix(&tiny()).unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_matrix(&b), Err(StoreError::BadMagic(_))));

        let mut b = good.clone();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_matrix(&b), Err(StoreError::UnsupportedVersion(2))));

        let mut b = good.clone();
        b[9] = 1;
        assert!(matches!(decode_matrix(&b), Err(StoreError::UnsupportedDtype(1))));

        let mut b = good.clone();
        b[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode_matrix(&b),
            Err(StoreError::DimensionOverflow { .. })
        ));

        let mut b = good.clone();
        b[10..18].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            decode_matrix(&b),
            Err(StoreError::DimensionOverflow { .. })
        ));

        assert!(matches!(
            decode_matrix(&good[..good.len() - 1]),
            Err(StoreError::Truncated(_))
        ));
    }

    #[test]
    fn duplicate_id_in_file_is_rejected() {
        let mut bytes = encode_matrix(&tiny()).unwrap();
        let n = bytes.len();
        bytes[n - 1] = b'a';
        assert!(matches!(
            decode_matrix(&bytes),
            Err(StoreError::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn save_refuses_duplicate_ids_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.taln");
        let m = EmbeddingMatrix {
            ids: vec!["a".into(), "a".into()],
            data: vec![1.0, 2.0],
            cols: 1,
            source: SourceTag::FactNative,
        };
        assert!(matches!(save_matrix(&m, &path), Err(StoreError::DuplicateId(_))));
        assert!(!path.exists());
    }

    #[test]
    fn save_then_load_three_by_four() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.taln");
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|i| (0..4).map(|j| (i * 4 + j) as f32 * 0.1 - 0.3).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(
            vec!["p1".into(), "p2".into(), "p3".into()],
            &rows,
            SourceTag::PostEnglish,
        )
        .unwrap();
        save_matrix(&m, &path).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), m);
    }
}
