//! Dense row-major matrices and the numeric kernels every other module uses.
//!
//! All products sum over the inner dimension in ascending index order. Rows
//! may be computed on different threads, but a single output entry is always
//! accumulated by one thread in that fixed order, so parallel and sequential
//! runs agree bit for bit.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape, Error, Result};
use crate::par;

/// Below this many multiply-adds per task, products stay on one thread.
const PAR_GRAIN: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from Normal(0, std²). `std == 0` gives zeros
    /// without consuming randomness.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        if std == 0.0 {
            return Self::zeros(rows, cols);
        }
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: w,
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
    }

    /// Concatenates matrices with equal row counts left to right.
    pub fn hconcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(shape("hconcat", "blocks differ in row count"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            out.set_cols(at, b);
            at += b.cols;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        axpy(&mut self.data, factor, &other.data);
        Ok(())
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "hadamard")?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a *= b);
        Ok(out)
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sums the rows into a single `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            axpy(&mut out.data, 1.0, self.row(i));
        }
        out
    }
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn min_rows(work_per_row: usize) -> usize {
    (PAR_GRAIN / work_per_row.max(1)).max(1)
}

/// Dense product `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, n);
    par::for_each_row_mut(&mut out.data, n, min_rows(k * n), |i, c_row| {
        let a_row = a.row(i);
        for (kk, &aik) in a_row.iter().enumerate().take(k) {
            axpy(c_row, aik, b.row(kk));
        }
    });
    Ok(out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let n = b.rows;
    let mut out = Matrix::zeros(a.rows, n);
    par::for_each_row_mut(&mut out.data, n, min_rows(a.cols * n), |i, c_row| {
        let a_row = a.row(i);
        for (j, c) in c_row.iter_mut().enumerate() {
            *c = dot(a_row, b.row(j));
        }
    });
    Ok(out)
}

/// `Aᵀ · B` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let n = b.cols;
    let mut out = Matrix::zeros(a.cols, n);
    par::for_each_row_mut(&mut out.data, n, min_rows(a.rows * n), |i, c_row| {
        for kk in 0..a.rows {
            let aki = a.data[kk * a.cols + i];
            if aki != 0.0 {
                axpy(c_row, aki, b.row(kk));
            }
        }
    });
    Ok(out)
}

/// Which (query, key) pairs may interact. Disallowed entries behave as −∞
/// logits without ever storing an infinity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AdditiveMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape(
                "AdditiveMask::new",
                format!("{} flags for {rows}x{cols}", allowed.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
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

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }

    /// Rows with no allowed entry. Callers decide what to do with them.
    pub fn degenerate_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.row_count(i) == 0).collect()
    }
}

/// Row-wise softmax of `s / scale` restricted to allowed entries.
///
/// The row maximum over allowed entries is always subtracted before
/// exponentiating. Disallowed entries come out as exactly `0.0`.
pub fn masked_softmax_rows(s: &Matrix, mask: &AdditiveMask, scale: f64) -> Result<Matrix> {
    if s.shape() != mask.shape() {
        return Err(shape(
            "masked_softmax_rows",
            format!("scores {:?} vs mask {:?}", s.shape(), mask.shape()),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax scale must be positive and finite, got {scale}"
        )));
    }
    if let Some(&row) = mask.degenerate_rows().first() {
        return Err(Error::DegenerateRow { row });
    }
    let cols = s.cols;
    let mut out = Matrix::zeros(s.rows, cols);
    par::for_each_row_mut(&mut out.data, cols, min_rows(cols * 8), |i, p_row| {
        softmax_row_into(s.row(i), mask.row(i), scale, p_row);
    });
    Ok(out)
}

fn softmax_row_into(s: &[f64], allowed: &[bool], scale: f64, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (&x, &a) in s.iter().zip(allowed) {
        if a {
            m = m.max(x / scale);
        }
    }
    let mut z = 0.0;
    for ((o, &x), &a) in out.iter_mut().zip(s).zip(allowed) {
        if a {
            let e = (x / scale - m).exp();
            *o = e;
            z += e;
        }
    }
    let inv = 1.0 / z;
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o *= inv;
        }
    }
}

/// Largest |S[i,j]| over allowed entries (all entries without a mask).
/// Zero when nothing is allowed; NaN if any considered entry is NaN.
pub fn max_abs_entries(s: &Matrix, mask: Option<&AdditiveMask>) -> f64 {
    let fold = |acc: f64, x: f64| {
        if acc.is_nan() || x.is_nan() {
            f64::NAN
        } else {
            acc.max(x.abs())
        }
    };
    match mask {
        None => s.data.iter().fold(0.0, |acc, &x| fold(acc, x)),
        Some(m) => {
            assert_eq!(s.shape(), m.shape(), "max_abs_entries: mask shape");
            s.data
                .iter()
                .zip(&m.allowed)
                .filter(|(_, &a)| a)
                .fold(0.0, |acc, (&x, _)| fold(acc, x))
        }
    }
}

/// Euclidean norm of all entries of all tensors taken together.
pub fn global_l2_norm<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> f64 {
    tensors
        .into_iter()
        .map(Matrix::sum_of_squares)
        .sum::<f64>()
        .sqrt()
}
