//! Dense float matrices and quantized-layer artifacts on disk.
//!
//! Matrix file layout (all little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `ADDQMAT\0`              |
//! | 8      | 1    | version (1)                    |
//! | 9      | 1    | dtype code (1 = float32 LE)    |
//! | 10     | 1    | ndim (2)                       |
//! | 11     | 8    | rows, u64                      |
//! | 19     | 8    | cols, u64                      |
//! | 27     | 4·rows·cols | row-major f32 payload   |
//!
//! Artifact layout ("AQV1"): 4-byte magic `AQV1`, then seven u32 header
//! fields (version, d_out, d_in, g, M, K, has_scales), then the M codebooks
//! (codebook-major, entry-major, K·g f32 each), then N·M u8 codes in group
//! order, then d_out f32 scales when `has_scales` is 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantcore::{CodeMatrix, CodebookSet};

pub const MATRIX_MAGIC: [u8; 8] = *b"ADDQMAT\0";
pub const MATRIX_VERSION: u8 = 1;
pub const DTYPE_F32_LE: u8 = 1;
const MATRIX_HEADER_LEN: usize = 27;

pub const ARTIFACT_MAGIC: [u8; 4] = *b"AQV1";
pub const ARTIFACT_VERSION: u32 = 1;
const ARTIFACT_HEADER_LEN: usize = 4 + 7 * 4;

/// Largest codebook that still fits one-byte codes.
pub const MAX_CODEBOOK_SIZE: usize = 256;

/// Row-major dense matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Dimension(format!("{rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn from_raw_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }
}

pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MATRIX_HEADER_LEN + 4 * m.data.len());
    buf.extend_from_slice(&MATRIX_MAGIC);
    buf.push(MATRIX_VERSION);
    buf.push(DTYPE_F32_LE);
    buf.push(2);
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 8 || bytes[..8] != MATRIX_MAGIC {
        return Err(Error::format("magic", "expected ADDQMAT\\0"));
    }
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("truncated: {} of {MATRIX_HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[8] != MATRIX_VERSION {
        return Err(Error::format(
            "version",
            format!("unknown version {}", bytes[8]),
        ));
    }
    if bytes[9] != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype(format!(
            "dtype code {} (only float32 LE = {DTYPE_F32_LE} is supported)",
            bytes[9]
        )));
    }
    if bytes[10] != 2 {
        return Err(Error::UnsupportedDtype(format!(
            "{}-D array (only 2-D is supported)",
            bytes[10]
        )));
    }
    let rows = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let count = usize::try_from(rows)
        .ok()
        .zip(usize::try_from(cols).ok())
        .and_then(|(r, c)| r.checked_mul(c))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let Some((count, payload_len)) = count else {
        return Err(Error::format("rows", format!("{rows}x{cols} overflows")));
    };
    let payload = &bytes[MATRIX_HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::format(
            "payload",
            format!(
                "{rows}x{cols} needs {payload_len} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    debug_assert_eq!(data.len(), count);
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            "payload",
            format!("non-finite value at flat index {pos}"),
        ));
    }
    Ok(DenseMatrix::from_raw_unchecked(
        rows as usize,
        cols as usize,
        data,
    ))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn save_matrix(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

/// A quantized layer as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedArtifact {
    pub d_out: usize,
    pub d_in: usize,
    pub codebooks: CodebookSet,
    pub codes: CodeMatrix,
    pub scales: Option<Vec<f32>>,
}

impl QuantizedArtifact {
    pub fn new(
        d_out: usize,
        d_in: usize,
        codebooks: CodebookSet,
        codes: CodeMatrix,
        scales: Option<Vec<f32>>,
    ) -> Result<Self> {
        let a = Self {
            d_out,
            d_in,
            codebooks,
            codes,
            scales,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn group_size(&self) -> usize {
        self.codebooks.group_size()
    }

    pub fn num_groups(&self) -> usize {
        self.codes.num_groups()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.codebooks.group_size();
        let k = self.codebooks.codebook_size();
        if k > MAX_CODEBOOK_SIZE {
            return Err(Error::Domain(format!(
                "K = {k} exceeds {MAX_CODEBOOK_SIZE}"
            )));
        }
        if !self.d_in.is_multiple_of(g) {
            return Err(Error::Dimension(format!(
                "g = {g} does not divide d_in = {}",
                self.d_in
            )));
        }
        let n = self.d_out * self.d_in / g;
        if self.codes.num_groups() != n {
            return Err(Error::Dimension(format!(
                "expected {n} groups, codes hold {}",
                self.codes.num_groups()
            )));
        }
        if self.codes.num_codebooks() != self.codebooks.num_codebooks() {
            return Err(Error::Dimension(
                "code width differs from codebook count".into(),
            ));
        }
        self.codes.check_against(&self.codebooks)?;
        if let Some(s) = &self.scales {
            if s.len() != self.d_out {
                return Err(Error::Dimension(format!(
                    "{} scales for {} output rows",
                    s.len(),
                    self.d_out
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_artifact(a: &QuantizedArtifact) -> Result<Vec<u8>> {
    a.validate()?;
    let cb = &a.codebooks;
    let (m, k, g) = (cb.num_codebooks(), cb.codebook_size(), cb.group_size());
    let header = [
        ARTIFACT_VERSION,
        to_u32(a.d_out, "d_out")?,
        to_u32(a.d_in, "d_in")?,
        to_u32(g, "g")?,
        to_u32(m, "M")?,
        to_u32(k, "K")?,
        a.scales.is_some() as u32,
    ];
    let mut buf = Vec::with_capacity(
        ARTIFACT_HEADER_LEN + 4 * m * k * g + a.codes.num_groups() * m + 4 * a.d_out,
    );
    buf.extend_from_slice(&ARTIFACT_MAGIC);
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in cb.entries() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(a.codes.flat().iter().map(|&c| c as u8));
    if let Some(s) = &a.scales {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn to_u32(v: usize, field: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Domain(format!("{field} = {v} does not fit 32 bits")))
}

pub fn decode_artifact(bytes: &[u8]) -> Result<QuantizedArtifact> {
    if bytes.len() < 4 || bytes[..4] != ARTIFACT_MAGIC {
        return Err(Error::format("magic", "expected AQV1"));
    }
    if bytes.len() < ARTIFACT_HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("truncated: {} of {ARTIFACT_HEADER_LEN} bytes", bytes.len()),
        ));
    }
    let word = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let version = word(0);
    if version != ARTIFACT_VERSION as usize {
        return Err(Error::format(
            "version",
            format!("unknown version {version}"),
        ));
    }
    let (d_out, d_in, g, m, k, has_scales) = (word(1), word(2), word(3), word(4), word(5), word(6));
    if d_out == 0 {
        return Err(Error::format("d_out", "must be positive"));
    }
    if d_in == 0 {
        return Err(Error::format("d_in", "must be positive"));
    }
    if g == 0 || d_in % g != 0 {
        return Err(Error::format(
            "g",
            format!("{g} does not divide d_in = {d_in}"),
        ));
    }
    if m == 0 {
        return Err(Error::format("M", "must be positive"));
    }
    if k == 0 || k > MAX_CODEBOOK_SIZE {
        return Err(Error::format(
            "K",
            format!("{k} outside 1..={MAX_CODEBOOK_SIZE}"),
        ));
    }
    if has_scales > 1 {
        return Err(Error::format(
            "has_scales",
            format!("flag is {has_scales}, expected 0 or 1"),
        ));
    }
    let n = d_out
        .checked_mul(d_in / g)
        .ok_or_else(|| Error::format("d_out", "group count overflows"))?;
    let cb_len = 4 * m * k * g;
    let codes_len = n * m;
    let scales_len = if has_scales == 1 { 4 * d_out } else { 0 };
    let expected = ARTIFACT_HEADER_LEN + cb_len + codes_len + scales_len;
    if bytes.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }

    let mut off = ARTIFACT_HEADER_LEN;
    let floats = |range: &[u8]| -> Vec<f32> {
        range
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let entries = floats(&bytes[off..off + cb_len]);
    off += cb_len;
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corruption("non-finite codebook entry".into()));
    }
    let raw_codes = &bytes[off..off + codes_len];
    off += codes_len;
    if let Some(pos) = raw_codes.iter().position(|&c| c as usize >= k) {
        return Err(Error::Corruption(format!(
            "code index {} at group {}, codebook {} is not below K = {k}",
            raw_codes[pos],
            pos / m,
            pos % m
        )));
    }
    let scales = (has_scales == 1).then(|| floats(&bytes[off..off + scales_len]));

    let codebooks = CodebookSet::new(m, k, g, entries)?;
    let codes = CodeMatrix::new(m, raw_codes.iter().map(|&c| c as u16).collect())?;
    QuantizedArtifact::new(d_out, d_in, codebooks, codes, scales)
}

pub fn write_artifact(a: &QuantizedArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_artifact(a)?).map_err(|e| Error::io(path, e))
}

pub fn read_artifact(path: impl AsRef<Path>) -> Result<QuantizedArtifact> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_artifact(&bytes)
}
