//! Dense row-major matrices and masked attention weighting.
//!
//! Everything here is a pure function of its inputs. Masked positions are
//! skipped outright (excluded from the max shift and from both sums), so a
//! hidden key contributes exactly zero rather than `exp(-inf)`.

use std::fmt;
use std::ops::{AddAssign, Index, IndexMut};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// available for the forward path only.
pub trait Real: Float + AddAssign + Default + fmt::Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()
    }
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Copies out the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, |r, c| self[(r, start + c)])
    }

    pub fn set_col_block(&mut self, start: usize, block: &Matrix<T>) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            for c in 0..block.cols {
                self[(r, start + c)] = block[(r, c)];
            }
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        self.same_shape("add", other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Self> {
        self.same_shape("sub", other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix<T>) -> Result<T> {
        self.same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Result<T> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Boolean visibility of keys (columns) for each query (row).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    n_queries: usize,
    n_keys: usize,
    bits: Vec<bool>,
}

impl TokenMask {
    /// Every row must expose at least one key.
    pub fn from_bits(n_queries: usize, n_keys: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_queries * n_keys {
            return Err(Error::shape(
                "TokenMask::from_bits",
                format!("{n_queries}x{n_keys}"),
                format!("len {}", bits.len()),
            ));
        }
        if let Some(row) = (0..n_queries).find(|&r| !bits[r * n_keys..(r + 1) * n_keys].contains(&true)) {
            return Err(Error::EmptyMaskRow { row });
        }
        Ok(Self {
            n_queries,
            n_keys,
            bits,
        })
    }

    pub fn all(n_queries: usize, n_keys: usize) -> Self {
        Self {
            n_queries,
            n_keys,
            bits: vec![true; n_queries * n_keys],
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n_keys + k]
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n_keys..(q + 1) * self.n_keys]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.n_keys);
        for &r in idx {
            bits.extend_from_slice(self.row(r));
        }
        Self {
            n_queries: idx.len(),
            n_keys: self.n_keys,
            bits,
        }
    }
}

/// `a · b` with accumulation in the element type.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape_str(), b.shape_str()));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    }))
}

fn check_attend_shapes<T: Real>(logits: &Matrix<T>, mask: &TokenMask) -> Result<()> {
    if logits.rows != mask.n_queries || logits.cols != mask.n_keys {
        return Err(Error::shape(
            "masked_attend",
            format!("logits {}", logits.shape_str()),
            format!("mask {}x{}", mask.n_queries, mask.n_keys),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("attention logits"));
    }
    Ok(())
}

/// Normalized attention weights for row `q`, written into `out`. Masked
/// entries are exactly zero.
fn row_weights<T: Real>(logits: &[T], visible: &[bool], row: usize, out: &mut [T]) -> Result<()> {
    let shift = logits
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&l, _)| l)
        .fold(None, |acc: Option<T>, l| Some(acc.map_or(l, |m| m.max(l))))
        .ok_or(Error::EmptyMaskRow { row })?;
    let mut denom = T::zero();
    for ((w, &l), &v) in out.iter_mut().zip(logits).zip(visible) {
        *w = if v { (l - shift).exp() } else { T::zero() };
        denom += *w;
    }
    for (w, &v) in out.iter_mut().zip(visible) {
        if v {
            *w = *w / denom;
        }
    }
    Ok(())
}

/// Softmax weights restricted to the visible entries of each row.
pub fn rowwise_weights<T: Real>(logits: &Matrix<T>, mask: &TokenMask) -> Result<Matrix<T>> {
    check_attend_shapes(logits, mask)?;
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for q in 0..logits.rows {
        let cols = logits.cols;
        row_weights(logits.row(q), mask.row(q), q, &mut out.data[q * cols..(q + 1) * cols])?;
    }
    Ok(out)
}

/// Row `i` of the result is `Σ_j w_ij values_j` where `w_i` is the softmax of
/// `logits_i` over the keys visible to query `i`.
pub fn masked_attend<T: Real>(logits: &Matrix<T>, mask: &TokenMask, values: &Matrix<T>) -> Result<Matrix<T>> {
    masked_attend_with_weights(logits, mask, values).map(|(out, _)| out)
}

/// [`masked_attend`] that also hands back the normalized weights.
pub fn masked_attend_with_weights<T: Real>(
    logits: &Matrix<T>,
    mask: &TokenMask,
    values: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if values.rows != logits.cols {
        return Err(Error::shape(
            "masked_attend",
            format!("logits {}", logits.shape_str()),
            format!("values {}", values.shape_str()),
        ));
    }
    let weights = rowwise_weights(logits, mask)?;
    let mut out = Matrix::zeros(logits.rows, values.cols);
    for q in 0..logits.rows {
        let out_row = &mut out.data[q * values.cols..(q + 1) * values.cols];
        for (k, (&w, &v)) in weights.row(q).iter().zip(mask.row(q)).enumerate() {
            if !v {
                continue;
            }
            for (o, &x) in out_row.iter_mut().zip(values.row(k)) {
                *o += w * x;
            }
        }
    }
    Ok((out, weights))
}
