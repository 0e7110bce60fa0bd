//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Everything here is single-threaded and reduces in a fixed order, so the
//! same inputs always give bit-identical outputs. `Tensor<f32>` is the working
//! type; `Tensor<f64>` exists so the head and losses can be checked against
//! finite differences with enough precision headroom.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn erf(self) -> Self;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar type")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of vectors along the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Adds `bias` to every vector along the last axis.
    pub fn add_row_vector(&mut self, bias: &Self) -> Result<()> {
        let c = self.last_dim();
        if bias.len() != c {
            return Err(Error::Shape(format!(
                "bias of length {} against last axis {c} of {:?}",
                bias.len(),
                self.shape
            )));
        }
        for row in self.data.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(())
    }

    /// Sums over every axis but the last, giving a vector of the last extent.
    pub fn sum_rows(&self) -> Self {
        let c = self.last_dim();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Self {
            shape: vec![c],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
        }
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix("matmul lhs")?;
    let (k2, n) = b.as_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul {:?} · {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_it * b_tj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`. This is the layout of `out × in` weight
/// matrices as stored by most checkpoints.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix("matmul_bt lhs")?;
    let (n, k2) = b.as_matrix("matmul_bt rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_bt {:?} · {:?}ᵀ: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`. Used for weight gradients.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.as_matrix("matmul_at lhs")?;
    let (k2, n) = b.as_matrix("matmul_at rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_at {:?}ᵀ · {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let a_row = &a.data[t * m..(t + 1) * m];
        let b_row = &b.data[t * n..(t + 1) * n];
        for (i, &a_ti) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ti * b_tj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Max-stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// In-place softmax of a single slice.
pub(crate) fn softmax_slice<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum = sum + *e;
    }
    for e in v.iter_mut() {
        *e = *e / sum;
    }
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    gamma.expect_shape(&[d], "layer_norm gamma")?;
    beta.expect_shape(&[d], "layer_norm beta")?;
    let n = T::from_usize(d).expect("extent fits in a float");
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Exact GELU, `x·Φ(x)` with `Φ(x) = (1 + erf(x/√2)) / 2`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64c(0.5);
    let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| v * half * (T::one() + (v * inv_sqrt2).erf()))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`, so evaluation needs no rescaling.
pub fn dropout_mask<T: Scalar>(rng: &mut Rng, shape: &[usize], rate: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate {rate} not in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(Tensor::full(shape, T::one()));
    }
    let keep = T::from_f64c(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}
