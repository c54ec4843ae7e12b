//! Dense row-major tensor with a fixed, documented summation order.
//!
//! Every reduction in this module (dot products, matrix products, row sums)
//! accumulates left to right starting from `0.0`. Results are therefore
//! bit-identical for identical inputs regardless of thread count.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static DEBUG_CHECKS: AtomicBool = AtomicBool::new(false);

/// Enable NaN/Inf detection at operation boundaries.
pub fn set_debug_checks(enabled: bool) {
    DEBUG_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn debug_checks() -> bool {
    DEBUG_CHECKS.load(Ordering::Relaxed)
}

/// Storage precision of a run. Values are always carried as `f64`; in
/// `F32` mode they are rounded through `f32` at the points a run chooses
/// (features, logits, parameter updates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} values, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows of a rank-2 tensor (or the leading axis of higher rank).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all axes after the first.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Gather rows by index into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    /// Stack rank-2 tensors of equal width vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("vstack", "column counts differ"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&[rows, cols], data)
    }

    /// Standard matrix product. Each output entry is `sum_k a[i,k] * b[k,j]`
    /// accumulated in ascending `k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        matmul_into(&self.data, &other.data, &mut out, r, k, c);
        let t = Tensor {
            shape: vec![r, c],
            data: out,
        };
        t.debug_finite("matmul")?;
        Ok(t)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let (r, c) = (self.shape[0], other.shape[0]);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let a = self.row(i);
            for j in 0..c {
                out.push(dot(a, other.row(j)));
            }
        }
        Tensor::from_vec(&[r, c], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", self.shape.len())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s * other`, elementwise.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with `NonFinite` when debug checks are on and a value is NaN/Inf.
    pub fn debug_finite(&self, op: &'static str) -> Result<()> {
        if debug_checks() && !self.is_finite() {
            return Err(Error::NonFinite(op));
        }
        Ok(())
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for x in &mut self.data {
                *x = precision.round(*x);
            }
        }
    }

    /// FNV-1a over shape and value bits; used to audit immutability.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for &s in &self.shape {
            h.write(&(s as u64).to_le_bytes());
        }
        for x in &self.data {
            h.write(&x.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// Row-major `out[r×c] = a[r×k] · b[k×c]`, ascending-`k` accumulation per entry.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        orow.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
