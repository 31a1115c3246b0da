//! Dense row-major `f64` tensors.
//!
//! This is deliberately small: shapes, flat storage, and the handful of
//! matrix products the hand-written forward/backward passes need. There is
//! no broadcasting and no autograd.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("tensor dimensions must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// A rank-1 tensor over `data`. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be nonempty");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("rows have different lengths"));
        }
        Tensor::new(vec![n, m], rows.concat())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.product(other, false, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.product(other, false, true)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.product(other, true, false)
    }

    fn product(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "inner dimensions disagree: {:?}{} x {:?}{}",
                self.shape,
                if ta { "ᵀ" } else { "" },
                other.shape,
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n])?;
        let a = MatRef::new(&self.data, ar, ac, ta);
        let b = MatRef::new(&other.data, br, bc, tb);
        gemm(1.0, a, b, 0.0, &mut out.data, m, n);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// A borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> MatRef<'a> {
    /// `rows`/`cols` describe the storage; `trans` flips the logical view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        assert!(data.len() >= rows * cols, "matrix storage too short");
        MatRef {
            data,
            rows,
            cols,
            trans,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = alpha * a · b + beta * c` where `c` is row-major `m × n`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], m: usize, n: usize) {
    let (am, ak) = a.logical();
    let (bk, bn) = b.logical();
    assert!(am == m && bn == n && ak == bk, "gemm dimension mismatch");
    assert!(c.len() >= m * n, "gemm output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index touched through the
    // strides lies inside the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ak,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
