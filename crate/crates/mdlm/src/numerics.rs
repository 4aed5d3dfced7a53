//! Dense linear algebra and transformer primitives.
//!
//! Everything downstream (the model sublayers, the step engine, the
//! verification checks) is expressed in terms of the operations here.
//! All arithmetic is `f64`; matrices are row-major.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Dense row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies `cols_per_block` consecutive columns starting at `start`.
    pub fn column_block(&self, start: usize, cols_per_block: usize) -> Matrix {
        debug_assert!(start + cols_per_block <= self.cols);
        let mut out = Matrix::zeros(self.rows, cols_per_block);
        for r in 0..self.rows {
            let src = &self.row(r)[start..start + cols_per_block];
            out.row_mut(r).copy_from_slice(src);
        }
        out
    }

    /// Writes `block` into the consecutive columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(self.rows, block.rows);
        debug_assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst_start = r * self.cols + start;
            self.data[dst_start..dst_start + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }
}

/// Standard matrix product.
///
/// Each output element accumulates over `k` in ascending order, regardless
/// of how rows are split across threads, so results are reproducible.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch {
            op: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let (n, k_dim, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    // Parallelism is over output rows; the per-element summation order is
    // fixed (k ascending), so the result is independent of thread count.
    out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
        let a_row = &a.data[i * k_dim..(i + 1) * k_dim];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    });
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Row-wise softmax of `s * scale`, stabilized by row-max subtraction.
pub fn row_softmax(s: &Matrix, scale: f64) -> Matrix {
    debug_assert!(scale > 0.0);
    let mut out = s.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row
            .iter()
            .map(|v| v * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Epsilon added inside the RMS at runtime. Scale-invariance holds exactly
/// only at zero, which is what [`rms_norm_with_eps`] is for.
pub const RMS_NORM_EPS: f64 = 1e-6;

/// Per-row RMS normalization with gain: `y_i = x_i / sqrt(mean(x^2) + eps) * g_i`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Result<Matrix> {
    rms_norm_with_eps(x, gain, RMS_NORM_EPS)
}

pub fn rms_norm_with_eps(x: &Matrix, gain: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::DimMismatch {
            op: "rms_norm",
            lhs_rows: x.rows,
            lhs_cols: x.cols,
            rhs_rows: 1,
            rhs_cols: gain.len(),
        });
    }
    let mut out = x.clone();
    let d = x.cols as f64;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (mean_sq + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

/// Rotary position embedding over adjacent lane pairs within each head.
///
/// Pair `k` of a head is rotated by `pos * theta_base^(-2k / d_head)`,
/// where `pos` is the token's global sequence index. Feeding response-only
/// rows with their global positions therefore yields the same rotation as a
/// full-sequence pass.
pub fn rope_rotate(
    x: &Matrix,
    positions: &[usize],
    theta_base: f64,
    d_head: usize,
) -> Result<Matrix> {
    if !d_head.is_multiple_of(2) {
        return Err(Error::OddHeadDim { d_head });
    }
    if !x.cols.is_multiple_of(d_head) {
        return Err(Error::HeadSplit {
            cols: x.cols,
            d_head,
        });
    }
    if positions.len() != x.rows {
        return Err(Error::PositionCount {
            rows: x.rows,
            positions: positions.len(),
        });
    }
    let n_heads = x.cols / d_head;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for h in 0..n_heads {
            let head = &mut row[h * d_head..(h + 1) * d_head];
            for k in 0..d_head / 2 {
                let angle = pos as f64 * theta_base.powf(-2.0 * k as f64 / d_head as f64);
                let (sin, cos) = angle.sin_cos();
                let a = head[2 * k];
                let b = head[2 * k + 1];
                head[2 * k] = a * cos - b * sin;
                head[2 * k + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// Norm below which a row is treated as the zero vector.
pub const COSINE_ZERO_NORM: f64 = 1e-12;

/// Per-row cosine similarity between two same-shape matrices.
///
/// A vanished row is "unchanged" only if its counterpart also vanished:
/// both rows near zero yield 1, exactly one near zero yields 0.
pub fn cosine_similarity_rows(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimMismatch {
            op: "cosine_similarity_rows",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Vec::with_capacity(a.rows);
    for r in 0..a.rows {
        let (ra, rb) = (a.row(r), b.row(r));
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = match (na < COSINE_ZERO_NORM, nb < COSINE_ZERO_NORM) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => dot / (na * nb),
        };
        out.push(s);
    }
    Ok(out)
}

/// Condition number `sigma_max / sigma_min` of a square matrix via
/// one-sided Jacobi SVD.
///
/// Column pairs are rotated until the largest relative off-diagonal
/// `|c| / sqrt(a*b)` falls below 1e-12; singular values are then the column
/// norms. Returns `f64::INFINITY` when `sigma_min < 1e-14`.
#[allow(clippy::needless_range_loop)]
pub fn condition_number(w: &Matrix) -> Result<f64> {
    if w.rows != w.cols {
        return Err(Error::NotSquare {
            rows: w.rows,
            cols: w.cols,
        });
    }
    let n = w.rows;
    if n == 0 {
        return Ok(1.0);
    }
    // Work on columns: cols[j] holds column j.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| w.get(i, j)).collect())
        .collect();
    const TOL: f64 = 1e-12;
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let mut a = 0.0;
                let mut b = 0.0;
                let mut c = 0.0;
                for i in 0..n {
                    a += cols[p][i] * cols[p][i];
                    b += cols[q][i] * cols[q][i];
                    c += cols[p][i] * cols[q][i];
                }
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                let rel = c.abs() / (a * b).sqrt();
                off = off.max(rel);
                if rel <= TOL {
                    continue;
                }
                let zeta = (b - a) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..n {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = cs * vp - sn * vq;
                    cols[q][i] = sn * vp + cs * vq;
                }
            }
        }
        if off <= TOL {
            break;
        }
    }
    let mut sigma_max = 0.0f64;
    let mut sigma_min = f64::INFINITY;
    for col in &cols {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        sigma_max = sigma_max.max(norm);
        sigma_min = sigma_min.min(norm);
    }
    if sigma_min < 1e-14 {
        return Ok(f64::INFINITY);
    }
    Ok(sigma_max / sigma_min)
}

/// SplitMix64 stream.
///
/// The same seed yields the same `u64` sequence on every platform, which is
/// what makes the weight files reproducible.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw strictly inside (0, 1): `((bits >> 11) + 0.5) / 2^53`.
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Box-Muller pair from two uniform draws (`u1` then `u2`).
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// Fills a matrix row-major with `stddev`-scaled normal draws.
///
/// Draw order: Box-Muller pairs are produced in sequence; the pair fills
/// positions `2i` and `2i+1`. When `rows*cols` is odd the final pair's
/// second value is discarded. This order is part of the weight-file
/// contract; do not change it.
pub fn rng_normal_fill(rng: &mut Rng, rows: usize, cols: usize, stddev: f64) -> Matrix {
    debug_assert!(stddev >= 0.0);
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (z0, z1) = rng.next_normal_pair();
        data.push(z0 * stddev);
        if data.len() < n {
            data.push(z1 * stddev);
        }
    }
    Matrix { rows, cols, data }
}
