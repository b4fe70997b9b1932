//! Dense 2-D `f32` kernels.
//!
//! Everything here is deterministic: loops run in a fixed order and never
//! reassociate sums, so the same inputs produce the same bits on every run.
//! Reductions that feed normalisation (softmax sums, layer-norm moments)
//! accumulate in `f64` before rounding back to `f32`.

use std::io::{Read, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

/// Row-major `rows × cols` grid of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Grid2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return shape_err("Grid2D::new", format!("empty grid {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return shape_err("Grid2D::new", format!("{} values for a {rows}x{cols} grid", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty grid {rows}x{cols}");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Grid2D::from_rows", "ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            g.data[i * n + i] = 1.0;
        }
        g
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn transpose(&self) -> Grid2D {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Grid2D { rows: self.cols, cols: self.rows, data: out }
    }

    /// Columns `start..start + width` as a new grid.
    pub fn col_slice(&self, start: usize, width: usize) -> Grid2D {
        assert!(start + width <= self.cols && width > 0);
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Grid2D { rows: self.rows, cols: width, data }
    }

    /// Writes `src` into columns `start..start + src.cols`.
    pub fn set_col_slice(&mut self, start: usize, src: &Grid2D) {
        assert!(src.rows == self.rows && start + src.cols <= self.cols);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn add(&self, other: &Grid2D) -> Result<Grid2D> {
        if self.shape() != other.shape() {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Grid2D { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Grid2D) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err("add_assign", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f32]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    pub fn scale(&self, s: f32) -> Grid2D {
        Grid2D { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid2D {
        Grid2D { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Rows at `indices`, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Grid2D> {
        if indices.is_empty() {
            return shape_err("gather_rows", "no indices");
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange { index: i, len: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Grid2D { rows: indices.len(), cols: self.cols, data })
    }

    /// Overwrites row `indices[j]` with row `j` of `src`.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Grid2D) -> Result<()> {
        if src.rows != indices.len() || src.cols != self.cols {
            return shape_err(
                "scatter_rows",
                format!("{} indices, source {:?}, target {:?}", indices.len(), src.shape(), self.shape()),
            );
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.rows });
        }
        for (j, &i) in indices.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(j));
        }
        Ok(())
    }
}

/// Matrix product with a fixed `i, k, j` loop order.
///
/// Every output element accumulates its `k` terms in increasing `k`, the
/// same order as the textbook triple loop, so results match it bit for bit.
pub fn matmul(a: &Grid2D, b: &Grid2D) -> Result<Grid2D> {
    if a.cols != b.rows {
        return shape_err("matmul", format!("lhs {}x{} cannot multiply rhs {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let (m, kk, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for k in 0..kk {
            let aik = a.data[i * kk + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(Grid2D { rows: m, cols: n, data: out })
}

/// Row-wise softmax of `scale * a`, with the row max subtracted first.
pub fn softmax_rows(a: &Grid2D, scale: f32) -> Grid2D {
    let mut out = a.clone();
    softmax_rows_in_place(&mut out, scale);
    out
}

pub(crate) fn softmax_rows_in_place(a: &mut Grid2D, scale: f32) {
    let cols = a.cols;
    for row in a.data.chunks_exact_mut(cols) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = (*v * scale - max).exp();
            *v = e;
            sum += f64::from(e);
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Per-row normalisation to zero mean and unit variance (no affine terms).
pub fn layer_norm_rows(a: &Grid2D, eps: f32) -> Grid2D {
    let cols = a.cols;
    let n = cols as f64;
    let mut out = a.clone();
    for row in out.data.chunks_exact_mut(cols) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for v in row.iter_mut() {
            *v = ((f64::from(*v) - mean) * inv) as f32;
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Indices of the `k` largest values, ties going to the lower index,
/// returned in ascending index order.
pub fn topk_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::TopK { k, len: values.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_rank =
        |&a: &usize, &b: &usize| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Seeded generator behind every random draw in the crate.
///
/// The bit stream is ChaCha8 keyed through `SeedableRng::seed_from_u64`
/// (rand_core's PCG32 seed expansion). `rand_chacha` keeps that stream
/// value-stable across platforms and releases, which makes traces portable.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// A pair of independent standard normals (Box–Muller).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// `rows × cols` i.i.d. standard normals, filled row-major from Box–Muller
/// pairs. An odd trailing element uses the first half of a fresh pair.
pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> Grid2D {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (z0, z1) = rng.normal_pair();
        data.push(z0 as f32);
        if data.len() < n {
            data.push(z1 as f32);
        }
    }
    Grid2D::new(rows, cols, data).expect("non-empty gaussian grid")
}

const SGRD_MAGIC: &[u8; 4] = b"SGRD";

/// Writes `SGRD`, rows and cols as `u32` LE, then row-major `f32` LE values.
pub fn write_grid(mut w: impl Write, g: &Grid2D) -> Result<()> {
    let rows = u32::try_from(g.rows).map_err(|_| Error::Format("rows exceed u32".into()))?;
    let cols = u32::try_from(g.cols).map_err(|_| Error::Format("cols exceed u32".into()))?;
    let mut buf = Vec::with_capacity(12 + g.data.len() * 4);
    buf.extend_from_slice(SGRD_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in &g.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid(mut r: impl Read) -> Result<Grid2D> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[..4] != SGRD_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format(format!("payload of {} bytes for a {rows}x{cols} grid", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Grid2D::new(rows, cols, data)
}
