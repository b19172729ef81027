//! Dense linear algebra and the Adam optimizer shared by every training loop.
//!
//! Everything here is `f64`. Reductions are sequential left-to-right so that
//! repeated runs are bit-identical; parallel callers split work by rows and
//! reduce partial results in a fixed order (see [`ordered_chunk_sum`]).

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Shape,
            "matrix {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            data.len()
        );
        ensure_finite(&data, "matrix")?;
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.len() == cols,
                Shape,
                "row {i} has {} entries, expected {cols}",
                r.len()
            );
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let rows = cols.first().map_or(0, Vec::len);
        for (j, c) in cols.iter().enumerate() {
            ensure!(
                c.len() == rows,
                Shape,
                "column {j} has {} entries, expected {rows}",
                c.len()
            );
        }
        let m = Self::from_fn(rows, cols.len(), |r, c| cols[c][r]);
        ensure_finite(&m.data, "matrix")?;
        Ok(m)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        ensure!(
            x.len() == self.cols,
            Shape,
            "matvec: matrix has {} columns, vector has {} entries",
            self.cols,
            x.len()
        );
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        Ok(Vector(y))
    }

    /// `y = A x` without shape checks beyond debug assertions.
    pub(crate) fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.row(r), x);
        }
    }

    /// `y = Aᵀ x`.
    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vector> {
        ensure!(
            x.len() == self.rows,
            Shape,
            "transpose_matvec: matrix has {} rows, vector has {} entries",
            self.rows,
            x.len()
        );
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, self.row(r), &mut y);
            }
        }
        Ok(Vector(y))
    }

    /// Rescales every column to unit L2 norm. Zero columns are left alone.
    pub fn normalize_columns(&mut self) {
        let mut norms = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (n, v) in norms.iter_mut().zip(self.row(r)) {
                *n += v * v;
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        for r in 0..self.rows {
            for (v, n) in self.row_mut(r).iter_mut().zip(&norms) {
                if *n > 0.0 {
                    *v /= n;
                }
            }
        }
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.cols).map(|c| norm(&self.column(c))).collect()
    }
}

/// Dense vector with finite entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        ensure_finite(&data, "vector")?;
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Standard basis vector `e_index`.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Free-function form of [`Matrix::matvec`].
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vector> {
    a.matvec(x)
}

pub fn ensure_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!(
            "{what} entry {i} is not finite ({})",
            xs[i]
        ))),
        None => Ok(()),
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

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "cosine_sim: lengths {} and {}",
        a.len(),
        b.len()
    );
    let (na, nb) = (norm(a), norm(b));
    ensure!(
        na > 0.0 && nb > 0.0,
        Degenerate,
        "cosine_sim of a zero-norm vector"
    );
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Storage precision for trained parameters.
///
/// Arithmetic always runs in `f64`; `F32` rounds parameters through `f32`
/// after every optimizer step, emulating single-precision weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn apply(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Sums per-chunk partial results in chunk order.
///
/// `items` are split into chunks of `chunk` elements; `partial` runs on each
/// chunk (in parallel) and returns a flat buffer of length `len`. The buffers
/// are then added sequentially, so the result does not depend on the number
/// of worker threads.
pub fn ordered_chunk_sum<T, F>(items: &[T], chunk: usize, len: usize, partial: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(&[T]) -> Vec<f64> + Sync,
{
    let parts: Vec<Vec<f64>> = items.par_chunks(chunk.max(1)).map(&partial).collect();
    let mut total = vec![0.0; len];
    for p in &parts {
        debug_assert_eq!(p.len(), len);
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v2: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v2: vec![0.0; len],
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            lr: config.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        ensure!(
            param.len() == self.m.len() && grad.len() == self.m.len(),
            Shape,
            "adam: state tracks {} values, param {} grad {}",
            self.m.len(),
            param.len(),
            grad.len()
        );
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "adam: gradient entry {i} is {}",
                grad[i]
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((m, v), g) in self.m.iter_mut().zip(self.v2.iter_mut()).zip(grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        if self.lr == 0.0 {
            return Ok(());
        }
        for ((p, m), v) in param.iter_mut().zip(&self.m).zip(&self.v2) {
            let m_hat = m / c1;
            let v_hat = v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, param: &mut [f64], grad: &[f64]) -> Result<()> {
    state.step(param, grad)
}
