//! Additive code model: codebooks, per-group codes, layer geometry and losses.
//!
//! A group is `g` consecutive weights of one output row. Group `i` lives at
//! row `i / (d_in / g)` and column block `i % (d_in / g)`, so every row shares
//! the same set of column-block Hessians.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::DenseMatrix;

/// Largest codebook the in-memory code representation can index.
pub const MAX_INDEX_SPACE: usize = u16::MAX as usize + 1;

/// M codebooks of K entries, each a `g`-vector. Stored codebook-major,
/// entry-major, exactly as in the artifact file.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    m: usize,
    k: usize,
    g: usize,
    entries: Vec<f32>,
}

impl CodebookSet {
    pub fn new(m: usize, k: usize, g: usize, entries: Vec<f32>) -> Result<Self> {
        if m == 0 || k == 0 || g == 0 {
            return Err(Error::Domain(format!(
                "codebook shape M={m}, K={k}, g={g} must be positive"
            )));
        }
        if k > MAX_INDEX_SPACE {
            return Err(Error::Domain(format!("K = {k} exceeds {MAX_INDEX_SPACE}")));
        }
        if entries.len() != m * k * g {
            return Err(Error::Dimension(format!(
                "M·K·g = {} entries expected, got {}",
                m * k * g,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite codebook entry".into()));
        }
        Ok(Self { m, k, g, entries })
    }

    pub fn zeros(m: usize, k: usize, g: usize) -> Result<Self> {
        Self::new(m, k, g, vec![0.0; m * k * g])
    }

    /// Builds a set from per-codebook `K×g` blocks in f64, rounding to f32.
    pub fn from_codebooks(g: usize, books: &[Vec<f64>]) -> Result<Self> {
        let m = books.len();
        if m == 0 || g == 0 {
            return Err(Error::Domain("need at least one codebook and g > 0".into()));
        }
        let k = books[0].len() / g;
        if books.iter().any(|b| b.len() != k * g) {
            return Err(Error::Dimension("codebooks differ in size".into()));
        }
        let entries = books.iter().flatten().map(|&v| v as f32).collect();
        Self::new(m, k, g, entries)
    }

    pub fn num_codebooks(&self) -> usize {
        self.m
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }

    pub fn group_size(&self) -> usize {
        self.g
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f32] {
        &mut self.entries
    }

    /// Codeword `c_{m,k}`.
    #[inline]
    pub fn codeword(&self, m: usize, k: usize) -> &[f32] {
        let off = (m * self.k + k) * self.g;
        &self.entries[off..off + self.g]
    }

    /// All K codewords of codebook `m`, flattened.
    pub fn codebook(&self, m: usize) -> &[f32] {
        let len = self.k * self.g;
        &self.entries[m * len..(m + 1) * len]
    }

    pub fn codebook_f64(&self, m: usize) -> Vec<f64> {
        self.codebook(m).iter().map(|&v| v as f64).collect()
    }

    pub fn set_codebook(&mut self, m: usize, values: &[f64]) {
        let len = self.k * self.g;
        for (dst, &v) in self.entries[m * len..(m + 1) * len].iter_mut().zip(values) {
            *dst = v as f32;
        }
    }

    /// Sum of the selected codewords. Exactly M lookups and M−1 vector
    /// additions in f32; nothing else.
    pub fn dequantize_group(&self, code: &[u16]) -> Result<Vec<f32>> {
        self.check_code(code)?;
        let mut out = vec![0.0f32; self.g];
        self.dequantize_into(code, &mut out);
        Ok(out)
    }

    pub(crate) fn dequantize_into(&self, code: &[u16], out: &mut [f32]) {
        out.copy_from_slice(self.codeword(0, code[0] as usize));
        for (m, &b) in code.iter().enumerate().skip(1) {
            for (o, &c) in out.iter_mut().zip(self.codeword(m, b as usize)) {
                *o += c;
            }
        }
    }

    pub fn check_code(&self, code: &[u16]) -> Result<()> {
        if code.len() != self.m {
            return Err(Error::Assignment(format!(
                "code has {} indices for {} codebooks",
                code.len(),
                self.m
            )));
        }
        if let Some((m, &b)) = code.iter().enumerate().find(|(_, &b)| b as usize >= self.k) {
            return Err(Error::Assignment(format!(
                "index {b} in codebook {m} is not below K = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Writes `target − Σ_m c_{m,b_m}` into `out`, subtracting codebooks in
    /// order in f64. This is the residual every cost in the crate is based on.
    #[inline]
    pub fn residual_into(&self, target: &[f64], code: &[u16], out: &mut [f64]) {
        out.copy_from_slice(target);
        for (m, &b) in code.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.codeword(m, b as usize)) {
                *o -= c as f64;
            }
        }
    }
}

/// Per-group code indices, `N` rows of `M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    m: usize,
    codes: Vec<u16>,
}

impl CodeMatrix {
    pub fn new(m: usize, codes: Vec<u16>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("code width M must be positive".into()));
        }
        if !codes.len().is_multiple_of(m) {
            return Err(Error::Dimension(format!(
                "{} indices do not form rows of {m}",
                codes.len()
            )));
        }
        Ok(Self { m, codes })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            m,
            codes: vec![0; n * m],
        }
    }

    /// Stacks per-codebook assignment columns into rows of codes.
    pub fn from_columns(columns: &[Vec<usize>]) -> Result<Self> {
        let m = columns.len();
        if m == 0 {
            return Err(Error::Domain("no assignment columns".into()));
        }
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension(
                "assignment columns differ in length".into(),
            ));
        }
        let mut codes = Vec::with_capacity(n * m);
        for i in 0..n {
            for col in columns {
                let v = u16::try_from(col[i])
                    .map_err(|_| Error::Assignment(format!("index {} too large", col[i])))?;
                codes.push(v);
            }
        }
        Ok(Self { m, codes })
    }

    pub fn num_groups(&self) -> usize {
        self.codes.len() / self.m
    }

    pub fn num_codebooks(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u16] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn code_mut(&mut self, i: usize) -> &mut [u16] {
        &mut self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn flat(&self) -> &[u16] {
        &self.codes
    }

    pub fn check_against(&self, cb: &CodebookSet) -> Result<()> {
        if self.m != cb.num_codebooks() {
            return Err(Error::Assignment(format!(
                "codes have width {}, codebook set has {} codebooks",
                self.m,
                cb.num_codebooks()
            )));
        }
        if let Some(pos) = self
            .codes
            .iter()
            .position(|&b| b as usize >= cb.codebook_size())
        {
            return Err(Error::Assignment(format!(
                "group {} codebook {}: index {} is not below K = {}",
                pos / self.m,
                pos % self.m,
                self.codes[pos],
                cb.codebook_size()
            )));
        }
        Ok(())
    }
}

/// Shape of a grouped weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub d_out: usize,
    pub d_in: usize,
    pub g: usize,
}

impl GroupLayout {
    pub fn new(d_out: usize, d_in: usize, g: usize) -> Result<Self> {
        if g == 0 || !d_in.is_multiple_of(g) {
            return Err(Error::Dimension(format!(
                "group size {g} does not divide d_in = {d_in}"
            )));
        }
        Ok(Self { d_out, d_in, g })
    }

    pub fn blocks_per_row(&self) -> usize {
        self.d_in / self.g
    }

    pub fn num_groups(&self) -> usize {
        self.d_out * self.blocks_per_row()
    }

    /// Column block of group `i`.
    #[inline]
    pub fn block_of(&self, i: usize) -> usize {
        i % self.blocks_per_row()
    }

    #[inline]
    pub fn row_of(&self, i: usize) -> usize {
        i / self.blocks_per_row()
    }

    pub fn group_index(&self, row: usize, block: usize) -> usize {
        row * self.blocks_per_row() + block
    }
}

/// `N` points of dimension `g` in f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    g: usize,
    data: Vec<f64>,
}

impl Groups {
    pub fn new(g: usize, data: Vec<f64>) -> Result<Self> {
        if g == 0 || !data.len().is_multiple_of(g) {
            return Err(Error::Dimension(format!(
                "{} values do not form {g}-vectors",
                data.len()
            )));
        }
        Ok(Self { g, data })
    }

    /// Splits `w` into groups in layout order.
    pub fn from_matrix(w: &DenseMatrix, g: usize) -> Result<Self> {
        GroupLayout::new(w.rows(), w.cols(), g)?;
        // row-major storage already is group order
        Ok(Self {
            g,
            data: w.data().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.g
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.g..(i + 1) * self.g]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.g..(i + 1) * self.g]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.g)
    }
}

/// Weights, calibration activations and group size of one layer.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub weights: DenseMatrix,
    pub activations: DenseMatrix,
    pub layout: GroupLayout,
}

impl LayerProblem {
    pub fn new(weights: DenseMatrix, activations: DenseMatrix, g: usize) -> Result<Self> {
        if activations.cols() != weights.cols() {
            return Err(Error::Dimension(format!(
                "activations have {} columns, weights have {}",
                activations.cols(),
                weights.cols()
            )));
        }
        let layout = GroupLayout::new(weights.rows(), weights.cols(), g)?;
        Ok(Self {
            weights,
            activations,
            layout,
        })
    }

    pub fn groups(&self) -> Groups {
        Groups::from_matrix(&self.weights, self.layout.g).expect("layout validated")
    }
}

/// Rebuilds Ŵ from codes by LUT dequantization of every group.
pub fn reconstruct_matrix(
    cb: &CodebookSet,
    codes: &CodeMatrix,
    d_out: usize,
    d_in: usize,
) -> Result<DenseMatrix> {
    let layout = GroupLayout::new(d_out, d_in, cb.group_size())?;
    if codes.num_groups() != layout.num_groups() {
        return Err(Error::Dimension(format!(
            "{} codes for a {d_out}x{d_in} matrix with g = {} ({} groups)",
            codes.num_groups(),
            cb.group_size(),
            layout.num_groups()
        )));
    }
    codes.check_against(cb)?;
    let g = cb.group_size();
    let mut data = vec![0.0f32; d_out * d_in];
    data.par_chunks_mut(g)
        .enumerate()
        .for_each(|(i, out)| cb.dequantize_into(codes.code(i), out));
    Ok(DenseMatrix::from_raw_unchecked(d_out, d_in, data))
}

/// Applies optional per-row scales after dequantization.
pub fn apply_row_scales(w_hat: &DenseMatrix, scales: Option<&[f32]>) -> Result<DenseMatrix> {
    let Some(scales) = scales else {
        return Ok(w_hat.clone());
    };
    if scales.len() != w_hat.rows() {
        return Err(Error::Dimension(format!(
            "{} scales for {} rows",
            scales.len(),
            w_hat.rows()
        )));
    }
    let cols = w_hat.cols();
    let data = w_hat
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v * scales[idx / cols])
        .collect();
    DenseMatrix::new(w_hat.rows(), cols, data)
}

/// ρ = N / K^M.
pub fn representational_ratio(n: u64, k: u64, m: u32) -> Result<f64> {
    if k == 0 || m == 0 {
        return Err(Error::Domain(format!(
            "K = {k} and M = {m} must be positive"
        )));
    }
    match (k as u128).checked_pow(m) {
        Some(cap) => Ok(n as f64 / cap as f64),
        None => Ok(n as f64 / (k as f64).powi(m as i32)),
    }
}

/// ‖X Wᵀ − X Ŵᵀ‖²_F with `W` stored as `d_out × d_in` and `X` as `n × d_in`.
pub fn layer_loss(x: &DenseMatrix, w: &DenseMatrix, w_hat: &DenseMatrix) -> Result<f64> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() {
        return Err(Error::Dimension(format!(
            "W is {}x{}, Ŵ is {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "X has {} columns, W has {}",
            x.cols(),
            w.cols()
        )));
    }
    let per_row: Vec<f64> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let diff: Vec<f64> = w
                .row(r)
                .iter()
                .zip(w_hat.row(r))
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect();
            (0..x.rows())
                .map(|s| {
                    let y: f64 = x
                        .row(s)
                        .iter()
                        .zip(&diff)
                        .map(|(&xv, &d)| xv as f64 * d)
                        .sum();
                    y * y
                })
                .sum()
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// `eᵀ H e` for a row-major `g×g` matrix, no validation.
#[inline]
pub(crate) fn quad_form(e: &[f64], h: &[f64]) -> f64 {
    let g = e.len();
    let mut acc = 0.0;
    for (a, &ea) in e.iter().enumerate() {
        let row = &h[a * g..(a + 1) * g];
        let hv: f64 = row.iter().zip(e).map(|(&hab, &eb)| hab * eb).sum();
        acc += ea * hv;
    }
    acc
}

pub(crate) fn check_symmetric(h: &[f64], g: usize, tol: f64) -> Result<()> {
    if h.len() != g * g {
        return Err(Error::Dimension(format!(
            "expected a {g}x{g} matrix, got {} values",
            h.len()
        )));
    }
    for a in 0..g {
        for b in (a + 1)..g {
            let (x, y) = (h[a * g + b], h[b * g + a]);
            if (x - y).abs() > tol * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Contract(format!(
                    "H is not symmetric at ({a},{b}): {x} vs {y}"
                )));
            }
        }
    }
    Ok(())
}

/// Hessian-weighted group error `(w − ŵ)ᵀ H (w − ŵ)`.
pub fn group_loss(w: &[f64], w_hat: &[f64], h: &[f64]) -> Result<f64> {
    let g = w.len();
    if w_hat.len() != g {
        return Err(Error::Dimension(format!(
            "w has {g} entries, ŵ has {}",
            w_hat.len()
        )));
    }
    check_symmetric(h, g, 1e-6)?;
    let e: Vec<f64> = w.iter().zip(w_hat).map(|(a, b)| a - b).collect();
    Ok(quad_form(&e, h))
}
