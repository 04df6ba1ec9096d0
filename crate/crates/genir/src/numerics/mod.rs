//! Dense linear algebra for the toy model: row-major tensors, matrix
//! products, row softmax, ReLU, RMS normalization, a reverse-mode tape
//! ([`tape`]) and a finite-difference checker ([`gradcheck`]).
//!
//! Values default to 32-bit storage; gradient checks run in the wide
//! (64-bit) mode by instantiating the same code at `f64`.

pub mod gradcheck;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Epsilon added under the square root in RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Element type for tensors: `f32` (default storage) or `f64` (wide mode).
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` over raw
    /// pointers with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dims/strides.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

// ---------------------------------------------------------------------------
// Tensor1
// ---------------------------------------------------------------------------

/// A dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1<R: Scalar> {
    data: Vec<R>,
}

impl<R: Scalar> Tensor1<R> {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![R::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<R>) -> Self {
        Self { data }
    }

    pub fn from_f64s(data: &[f64]) -> Self {
        Self {
            data: data.iter().map(|&x| R::of_f64(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[R] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<R> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: (1, self.len()),
                rhs: (1, other.len()),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm2(&self) -> R {
        self.data
            .iter()
            .map(|&x| x * x)
            .sum::<R>()
            .sqrt()
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &Self) -> Result<Option<R>> {
        let d = self.dot(other)?;
        let n = self.norm2() * other.norm2();
        if n == R::zero() {
            Ok(None)
        } else {
            Ok(Some(d / n))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: (1, self.len()),
                rhs: (1, other.len()),
            });
        }
        Ok(Self::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: (1, self.len()),
                rhs: (1, other.len()),
            });
        }
        Ok(Self::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        ))
    }

    pub fn scale(&self, c: R) -> Self {
        Self::from_vec(self.data.iter().map(|&x| x * c).collect())
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                lhs: (1, self.len()),
                rhs: (1, other.len()),
            });
        }
        Ok(Self::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> R {
        self.data
            .iter()
            .fold(R::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            })
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0usize;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// View as a 1-by-n matrix.
    pub fn to_row(&self) -> Tensor2<R> {
        Tensor2::from_vec(1, self.len(), self.data.clone())
    }
}

/// ReLU: negatives clamp to zero.
pub fn relu<R: Scalar>(x: &Tensor1<R>) -> Tensor1<R> {
    Tensor1::from_vec(
        x.as_slice()
            .iter()
            .map(|&v| if v > R::zero() { v } else { R::zero() })
            .collect(),
    )
}

/// Numerically stable softmax of `scale * s` (max subtraction).
///
/// Output entries lie in (0,1), sum to 1, and preserve the input order.
pub fn scaled_softmax<R: Scalar>(s: &Tensor1<R>, scale: R) -> Tensor1<R> {
    let mut out = s.as_slice().to_vec();
    softmax_row_in_place(&mut out, scale);
    Tensor1::from_vec(out)
}

fn softmax_row_in_place<R: Scalar>(row: &mut [R], scale: R) {
    let mut max = R::neg_infinity();
    for &x in row.iter() {
        let v = x * scale;
        if v > max {
            max = v;
        }
    }
    let mut sum = R::zero();
    for x in row.iter_mut() {
        let e = (*x * scale - max).exp();
        *x = e;
        sum = sum + e;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// RMS normalization with unit gain: `x / sqrt(mean(x^2) + eps)`.
///
/// Rejects all-zero input; the epsilon only guards against rounding, it is
/// not meant to make the degenerate case meaningful.
pub fn rms_norm<R: Scalar>(x: &Tensor1<R>, gain: &Tensor1<R>) -> Result<Tensor1<R>> {
    if x.as_slice().iter().all(|&v| v == R::zero()) {
        return Err(Error::InvalidArgument(
            "rms_norm: all-zero input".to_string(),
        ));
    }
    if x.len() != gain.len() {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            lhs: (1, x.len()),
            rhs: (1, gain.len()),
        });
    }
    let (out, _) = rms_norm_unchecked(x, gain);
    Ok(out)
}

/// RMS normalization that tolerates all-zero input (returns zeros there).
/// Also returns the denominator `sqrt(mean(x^2) + eps)` for analyses that
/// need the frozen scaling of a recorded pass.
pub fn rms_norm_unchecked<R: Scalar>(x: &Tensor1<R>, gain: &Tensor1<R>) -> (Tensor1<R>, R) {
    let n = R::from_usize(x.len()).unwrap();
    let ms = x.as_slice().iter().map(|&v| v * v).sum::<R>() / n;
    let denom = (ms + R::of_f64(RMS_EPS)).sqrt();
    let out = Tensor1::from_vec(
        x.as_slice()
            .iter()
            .zip(gain.as_slice())
            .map(|(&v, &g)| v / denom * g)
            .collect(),
    );
    (out, denom)
}

// ---------------------------------------------------------------------------
// Tensor2
// ---------------------------------------------------------------------------

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<R: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Scalar> Tensor2<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_tensor(&self, i: usize) -> Tensor1<R> {
        Tensor1::from_vec(self.row(i).to_vec())
    }

    pub fn as_slice(&self) -> &[R] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// View a single-row matrix as a vector.
    pub fn to_tensor1(&self) -> Tensor1<R> {
        assert_eq!(self.rows, 1, "to_tensor1 requires a single row");
        Tensor1::from_vec(self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            })
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    /// `self * other` (m,k)x(k,n).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        unsafe {
            R::gemm(
                self.rows,
                self.cols,
                other.cols,
                R::one(),
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                R::zero(),
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self * other^T` (m,k)x(n,k) -> (m,n).
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        unsafe {
            R::gemm(
                self.rows,
                self.cols,
                other.rows,
                R::one(),
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                1,
                other.cols as isize,
                R::zero(),
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self^T * other` (k,m)x(k,n) -> (m,n).
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        unsafe {
            R::gemm(
                self.cols,
                self.rows,
                other.cols,
                R::one(),
                self.data.as_ptr(),
                1,
                self.cols as isize,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                R::zero(),
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, c: R) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        })
    }

    pub fn relu(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| if v > R::zero() { v } else { R::zero() })
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Row-wise RMS normalization with a broadcast gain row. Returns the
    /// normalized matrix and the per-row denominators.
    pub fn rms_norm_rows(&self, gain: &Self) -> Result<(Self, Vec<R>)> {
        if gain.rows != 1 || gain.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "rms_norm_rows",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        let n = R::from_usize(self.cols).unwrap();
        let eps = R::of_f64(RMS_EPS);
        let mut out = Self::zeros(self.rows, self.cols);
        let mut denoms = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<R>() / n;
            let denom = (ms + eps).sqrt();
            denoms.push(denom);
            for (j, (&v, &g)) in row.iter().zip(gain.as_slice()).enumerate() {
                out.data[i * self.cols + j] = v / denom * g;
            }
        }
        Ok((out, denoms))
    }

    /// Row-wise stable softmax of `scale * row`.
    pub fn scaled_softmax_rows(&self, scale: R) -> Self {
        let mut out = self.clone();
        for i in 0..out.rows {
            softmax_row_in_place(out.row_mut(i), scale);
        }
        out
    }

    /// Horizontal concatenation.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(i)[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Gather rows by index.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "select_rows: index {idx} out of bounds for {} rows",
                    self.rows
                )));
            }
            out.row_mut(i).copy_from_slice(self.row(idx));
        }
        Ok(out)
    }

    /// Cast element type (used when loading 32-bit weights in wide mode).
    pub fn cast<S: Scalar>(&self) -> Tensor2<S> {
        Tensor2::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| S::of_f64(x.as_f64())).collect(),
        )
    }
}

/// Standard matrix product (spec-level entry point; see also the
/// transposed variants on [`Tensor2`]).
pub fn matmul<R: Scalar>(a: &Tensor2<R>, b: &Tensor2<R>) -> Result<Tensor2<R>> {
    a.matmul(b)
}

/// Stable `-log softmax(z)[target]` plus the softmax probabilities.
/// Shared by the tape op and the inference-path loss so both produce
/// bit-identical values.
pub fn cross_entropy_logits<R: Scalar>(z: &[R], target: usize) -> (R, Vec<R>) {
    debug_assert!(target < z.len());
    let max = z.iter().fold(R::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut sum = R::zero();
    let mut probs = Vec::with_capacity(z.len());
    for &x in z {
        let e = (x - max).exp();
        probs.push(e);
        sum = sum + e;
    }
    for p in probs.iter_mut() {
        *p = *p / sum;
    }
    let loss = -(z[target] - max - sum.ln());
    (loss, probs)
}
