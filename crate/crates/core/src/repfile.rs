// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary rep files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "PPRB"
//! version    u32      1 = encoded rep, 2 = feature set
//! N          u32      rows
//! d          u32      columns
//! k          u32      real prompt tokens (0 for feature sets)
//! encoder_id u32 length + UTF-8 bytes
//! layer      i32      -1 when absent
//! segments   N bytes  0=BOS 1=PROMPT 2=EOS 3=PAD   (version 1 only)
//! body       N*d f32  row-major
//! ```
//!
//! The rep source (full/clean/mixed) is not part of the wire format; on
//! read it is `Clean` when `k == 0` and every position is a pad or special
//! token, otherwise `Full`. Sidecar JSON carries the exact provenance.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reptypes::{EncodedRep, RepSource, Segment};

pub const MAGIC: &[u8; 4] = b"PPRB";
pub const VERSION_REP: u32 = 1;
pub const VERSION_FEATURES: u32 = 2;

/// Feature matrix as stored on disk (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub extractor_id: String,
    pub vectors: Matrix,
}

pub fn encode_rep(rep: &EncodedRep) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(
        &mut out,
        VERSION_REP,
        rep.matrix(),
        rep.k() as u32,
        rep.encoder_id(),
        rep.layer().map_or(-1, |l| l as i32),
    );
    out.extend(rep.segment_map().iter().map(|s| s.to_byte()));
    write_body(&mut out, rep.matrix());
    out
}

pub fn encode_features(f: &FeatureFile) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(
        &mut out,
        VERSION_FEATURES,
        &f.vectors,
        0,
        &f.extractor_id,
        -1,
    );
    write_body(&mut out, &f.vectors);
    out
}

fn write_header(out: &mut Vec<u8>, version: u32, m: &Matrix, k: u32, id: &str, layer: i32) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
}

fn write_body(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Header {
    version: u32,
    rows: usize,
    cols: usize,
    k: u32,
    id: String,
    layer: i32,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::RepFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn read_header(c: &mut Cursor<'_>) -> Result<Header> {
    if c.take(4)? != MAGIC {
        return Err(Error::RepFormat("bad magic".into()));
    }
    let version = c.u32()?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let k = c.u32()?;
    let id_len = c.u32()? as usize;
    let id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|e| Error::RepFormat(format!("encoder id: {e}")))?
        .to_string();
    let layer = c.i32()?;
    Ok(Header {
        version,
        rows,
        cols,
        k,
        id,
        layer,
    })
}

fn read_body(c: &mut Cursor<'_>, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::RepFormat("dimensions overflow".into()))?;
    let bytes = c.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::RepFormat("dimensions overflow".into()))?,
    )?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if c.pos != c.buf.len() {
        return Err(Error::RepFormat(format!(
            "{} trailing bytes",
            c.buf.len() - c.pos
        )));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn decode_rep(buf: &[u8]) -> Result<EncodedRep> {
    let mut c = Cursor { buf, pos: 0 };
    let h = read_header(&mut c)?;
    if h.version != VERSION_REP {
        return Err(Error::RepFormat(format!(
            "expected rep version {VERSION_REP}, found {}",
            h.version
        )));
    }
    let segs = c
        .take(h.rows)?
        .iter()
        .map(|&b| Segment::from_byte(b))
        .collect::<Result<Vec<_>>>()?;
    let matrix = read_body(&mut c, h.rows, h.cols)?;
    let k = segs.iter().filter(|&&s| s == Segment::Prompt).count();
    if k != h.k as usize {
        return Err(Error::RepFormat(format!(
            "header k={} but segment map has {k} prompt positions",
            h.k
        )));
    }
    let source = if k == 0 {
        RepSource::Clean
    } else {
        RepSource::Full
    };
    let layer = match h.layer {
        -1 => None,
        l if l >= 0 => Some(l as u32),
        l => return Err(Error::RepFormat(format!("invalid layer {l}"))),
    };
    EncodedRep::new(matrix, segs, source, h.id, layer)
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureFile> {
    let mut c = Cursor { buf, pos: 0 };
    let h = read_header(&mut c)?;
    if h.version != VERSION_FEATURES {
        return Err(Error::RepFormat(format!(
            "expected feature version {VERSION_FEATURES}, found {}",
            h.version
        )));
    }
    if h.k != 0 || h.layer != -1 {
        return Err(Error::RepFormat(
            "feature files carry k=0 and layer=-1".into(),
        ));
    }
    let vectors = read_body(&mut c, h.rows, h.cols)?;
    Ok(FeatureFile {
        extractor_id: h.id,
        vectors,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn write_rep(path: &Path, rep: &EncodedRep) -> Result<()> {
    write_all(path, &encode_rep(rep))
}

pub fn read_rep(path: &Path) -> Result<EncodedRep> {
    decode_rep(&read_all(path)?)
}

pub fn write_features(path: &Path, f: &FeatureFile) -> Result<()> {
    write_all(path, &encode_features(f))
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&read_all(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let rep = EncodedRep::new(
            Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap(),
            vec![Segment::Prompt, Segment::Pad],
            RepSource::Full,
            "ab",
            Some(3),
        )
        .unwrap();
        let bytes = encode_rep(&rep);
        let expected: Vec<u8> = [
            b"PPRB".as_slice(),
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            b"ab",
            &3i32.to_le_bytes(),
            &[1, 3],
            &1.0f32.to_le_bytes(),
            &(-2.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_truncated_and_wrong_version() {
        let f = FeatureFile {
            extractor_id: "x".into(),
            vectors: Matrix::zeros(2, 2),
        };
        let bytes = encode_features(&f);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_rep(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad).is_err());
    }

    proptest! {
        #[test]
        fn rep_roundtrip(rows in 1usize..12, cols in 1usize..6, k in 0usize..5, layer in proptest::option::of(0u32..40), seed in any::<u64>()) {
            let k = k.min(rows - 1);
            let mut segs = vec![Segment::Bos];
            segs.extend(std::iter::repeat_n(Segment::Prompt, k));
            segs.resize(rows.max(1), Segment::Pad);
            segs.truncate(rows);
            let data: Vec<f32> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) / 7.0 - 50.0).collect();
            let source = if segs.contains(&Segment::Prompt) { RepSource::Full } else { RepSource::Clean };
            let rep = EncodedRep::new(Matrix::from_vec(rows, cols, data).unwrap(), segs, source, "toy-enc", layer).unwrap();
            let back = decode_rep(&encode_rep(&rep)).unwrap();
            prop_assert_eq!(back, rep);
        }
    }
}
