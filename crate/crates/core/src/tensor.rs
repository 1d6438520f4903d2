//! Dense row-major n-dimensional arrays.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating point element type usable in arrays and the autodiff graph.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c <- alpha * a b + beta * c` for an `m x k` times `k x n` product on strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        dims: [usize; 3],
        alpha: Self,
        a: Strided<'_, Self>,
        b: Strided<'_, Self>,
        beta: Self,
        c: StridedMut<'_, Self>,
    );
}

/// Read-only matrix view: `(data, row stride, column stride)`.
pub type Strided<'a, T> = (&'a [T], usize, usize);
pub type StridedMut<'a, T> = (&'a mut [T], usize, usize);

/// Panics unless every `(i, j)` with `i < rows`, `j < cols` indexes inside `len`.
fn check_view(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    let last = (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(rows == 0 || cols == 0 || last < len, "gemm view out of bounds");
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        fn gemm(
            dims: [usize; 3],
            alpha: Self,
            a: Strided<'_, Self>,
            b: Strided<'_, Self>,
            beta: Self,
            c: StridedMut<'_, Self>,
        ) {
            let [m, k, n] = dims;
            check_view(a.0.len(), m, k, a.1, a.2);
            check_view(b.0.len(), k, n, b.1, b.2);
            check_view(c.0.len(), m, n, c.1, c.2);
            // SAFETY: the three views were bounds-checked above and `c` is uniquely borrowed.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    alpha,
                    a.0.as_ptr(),
                    a.1 as isize,
                    a.2 as isize,
                    b.0.as_ptr(),
                    b.1 as isize,
                    b.2 as isize,
                    beta,
                    c.0.as_mut_ptr(),
                    c.1 as isize,
                    c.2 as isize,
                )
            }
        }
    };
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    impl_gemm!(f32, matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    impl_gemm!(f64, matrixmultiply::dgemm);
}

/// Row-major strides for `shape` (last axis fastest).
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> NdArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("axis {axis} of shape {shape:?} has zero length")));
        }
        let numel = checked_numel(&shape)?;
        if numel != data.len() {
            return Err(Error::dim("data length", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(low, high).expect("valid uniform range");
        Self::from_fn(shape, |_| T::lit(dist.sample(rng)))
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index; `None` when out of range.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        let mut stride = 1;
        for (i, &d) in index.iter().zip(&self.shape).rev() {
            if *i >= d {
                return None;
            }
            off += i * stride;
            stride *= d;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.get(index)
            .unwrap_or_else(|| panic!("index {index:?} out of bounds for {:?}", self.shape))
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self
            .offset(index)
            .unwrap_or_else(|| panic!("index {index:?} out of bounds for {:?}", self.shape));
        self.data[off] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
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
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Gather channels (axis 1) of a `[B, C, ...]` array by `index`.
    pub fn gather_channels(&self, index: &[usize]) -> Result<Self> {
        if self.ndim() < 2 {
            return Err(Error::Shape("gather_channels needs rank >= 2".into()));
        }
        let (batch, channels) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= channels) {
            return Err(Error::Range(format!(
                "channel index {bad} out of range for {channels} channels"
            )));
        }
        let mut out = Vec::with_capacity(batch * index.len() * inner);
        for b in 0..batch {
            for &c in index {
                let start = (b * channels + c) * inner;
                out.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = index.len();
        Self::new(shape, out)
    }

    /// Concatenate `[B, C_i, ...]` arrays along axis 1.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero arrays".into()))?;
        let batch = first.shape[0];
        let tail = &first.shape[2..];
        for p in parts {
            if p.ndim() != first.ndim() || p.shape[0] != batch || &p.shape[2..] != tail {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?} along channels",
                    p.shape, first.shape
                )));
            }
        }
        let inner: usize = tail.iter().product();
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for p in parts {
                let chunk = p.shape[1] * inner;
                out.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = total;
        Self::new(shape, out)
    }

    /// Slice `count` channels starting at `start` along axis 1.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Result<Self> {
        let channels = self.shape[1];
        if start + count > channels || count == 0 {
            return Err(Error::Range(format!(
                "channel slice {start}..{} out of range for {channels}",
                start + count
            )));
        }
        let index: Vec<usize> = (start..start + count).collect();
        self.gather_channels(&index)
    }

    /// Select rows (axis 0) by index.
    pub fn select_batch(&self, rows: &[usize]) -> Result<Self> {
        let inner: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Range(format!("row {r} out of range")));
            }
            out.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, out)
    }

    /// Stack arrays with equal trailing shapes along axis 0.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero arrays".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::DimOverflow(format!("shape {shape:?} overflows usize")))
    })
}
