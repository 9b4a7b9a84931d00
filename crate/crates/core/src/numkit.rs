//! Dense f64 kernels shared by every subsystem: vectors, row-major matrices,
//! elementwise nonlinearities, seeded randomness, and grid upsampling.
//!
//! Everything here is a pure function over immutable inputs. [`SeededRng`] is
//! the one stateful type; give each concurrent consumer its own stream via
//! [`SeededRng::fork`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

/// Dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    /// Vector with every entry set to `value`.
    pub fn constant(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &DenseVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "DenseMatrix::from_data",
                format!("{} entries for {}x{}", data.len(), rows, cols),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("DenseMatrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> DenseVector {
        DenseVector::from_vec(self.row(r).to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rank-1 update `self += scale * a * b^T` with `a` along rows.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &av) in a.iter().enumerate() {
            let f = scale * av;
            if f == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (dst, &bv) in row.iter_mut().zip(b) {
                *dst += f * bv;
            }
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Matrix-vector product `m * v`.
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols != v.len() {
        return Err(Error::dim(
            "matvec",
            format!("{}x{} matrix with length-{} vector", m.rows, m.cols, v.len()),
        ));
    }
    let mut out = Vec::with_capacity(m.rows);
    let vs = v.as_slice();
    for r in 0..m.rows {
        out.push(dot_slices(m.row(r), vs));
    }
    Ok(DenseVector::from_vec(out))
}

/// Transposed product `m^T * v`, without materializing the transpose.
pub fn matvec_t(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.rows != v.len() {
        return Err(Error::dim(
            "matvec_t",
            format!("{}x{} matrix with length-{} vector", m.rows, m.cols, v.len()),
        ));
    }
    let mut out = vec![0.0; m.cols];
    for (r, &vr) in v.as_slice().iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(m.row(r)) {
            *o += vr * mv;
        }
    }
    Ok(DenseVector::from_vec(out))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Elementwise nonlinearities used by the adapter stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Sigmoid,
    Relu,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Apply `kind` elementwise; output has the same length.
pub fn apply_nonlinearity(v: &DenseVector, kind: Nonlinearity) -> DenseVector {
    let data = v
        .iter()
        .map(|&x| match kind {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Relu => x.max(0.0),
        })
        .collect();
    DenseVector::from_vec(data)
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "hadamard",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let data = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    Ok(DenseVector::from_vec(data))
}

const FORK_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(FORK_MIX);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream. Identical seed, identical stream, on every
/// platform. Single-consumer: fork one stream per concurrent user.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream from this seed and a purpose tag.
    /// Forking does not consume from the parent stream, so two components
    /// forked with the same tag see identical streams regardless of what
    /// happened in between.
    pub fn fork(&self, tag: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ tag.wrapping_mul(FORK_MIX)))
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random_range(0.0..1.0) < p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }

    /// Stream position, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuild a stream at a saved position.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        Self { seed, rng }
    }
}

/// Matrix with entries uniform in `[-b, b]`, `b = sqrt(6 / (rows + cols))`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs positive dims");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    DenseMatrix {
        rows,
        cols,
        data,
    }
}

/// How grid cells are interpolated when upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

/// Bilinear upsampling with corner-aligned coordinates:
/// `src = dst * (srcDim - 1) / (dstDim - 1)`. Single-row or single-column
/// inputs replicate along the degenerate axis. Upsampling to the input size
/// returns the input exactly.
pub fn bilinear_upsample(grid: &DenseMatrix, out_h: usize, out_w: usize) -> Result<DenseMatrix> {
    upsample(grid, out_h, out_w, UpsampleMode::Bilinear)
}

/// Nearest-neighbor variant under the same corner-aligned mapping.
pub fn nearest_upsample(grid: &DenseMatrix, out_h: usize, out_w: usize) -> Result<DenseMatrix> {
    upsample(grid, out_h, out_w, UpsampleMode::Nearest)
}

pub fn upsample(
    grid: &DenseMatrix,
    out_h: usize,
    out_w: usize,
    mode: UpsampleMode,
) -> Result<DenseMatrix> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::InvalidArgument("upsample of empty grid".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "upsample output dimensions must be nonzero".into(),
        ));
    }
    if out_h < grid.rows || out_w < grid.cols {
        return Err(Error::InvalidArgument(format!(
            "upsample target {}x{} smaller than source {}x{}",
            out_h, out_w, grid.rows, grid.cols
        )));
    }

    let src_coord = |dst: usize, dst_dim: usize, src_dim: usize| -> f64 {
        if dst_dim <= 1 || src_dim <= 1 {
            0.0
        } else {
            dst as f64 * (src_dim - 1) as f64 / (dst_dim - 1) as f64
        }
    };

    let mut out = DenseMatrix::zeros(out_h, out_w);
    for r in 0..out_h {
        let sy = src_coord(r, out_h, grid.rows);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(grid.rows - 1);
        let fy = sy - y0 as f64;
        for c in 0..out_w {
            let sx = src_coord(c, out_w, grid.cols);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(grid.cols - 1);
            let fx = sx - x0 as f64;
            let v = match mode {
                UpsampleMode::Bilinear => {
                    let top = (1.0 - fx) * grid.get(y0, x0) + fx * grid.get(y0, x1);
                    let bot = (1.0 - fx) * grid.get(y1, x0) + fx * grid.get(y1, x1);
                    (1.0 - fy) * top + fy * bot
                }
                UpsampleMode::Nearest => {
                    let yn = if fy < 0.5 { y0 } else { y1 };
                    let xn = if fx < 0.5 { x0 } else { x1 };
                    grid.get(yn, xn)
                }
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}
