//! Dense row-major tensors of `f64`.
//!
//! Images are rank-3 tensors laid out as `H×W×C` with the channel index
//! varying fastest, so pixel `(y, x, c)` lives at `(y * W + x) * C + c`.

use crate::error::{Error, Result};

/// A dense tensor of rank 1 to 4 holding finite 64-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Image tensors are plain rank-3 tensors with values nominally in `[0, 1]`.
pub type Image = Tensor;

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Shape(format!("rank must be 1..=4, got dims {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    Ok(dims.iter().product())
}

pub(crate) fn first_non_finite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl Tensor {
    /// Builds a tensor, validating rank, length and finiteness.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        let len = check_dims(&dims)?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { context: "Tensor::new".into(), index });
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for results of operations that are known to be
    /// shape-consistent. Finiteness is checked by the callers that can break it.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = check_dims(dims).expect("invalid dims");
        assert!(value.is_finite(), "fill value must be finite");
        Self { dims: dims.to_vec(), data: vec![value; len] }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims.to_vec(), (0..len).map(f).collect())
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            d => Err(Error::Shape(format!("expected an H×W×C tensor, got dims {d:?}"))),
        }
    }

    /// Value at `(y, x, c)` of a rank-3 tensor.
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, ch) = (self.dims[1], self.dims[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.dims, dims)));
        }
        Ok(Self { dims: dims.to_vec(), data: self.data.clone() })
    }

    fn same_dims(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{op}: dims {:?} and {:?} differ", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { context: "Tensor::map".into(), index });
        }
        Ok(Self { dims: self.dims.clone(), data })
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_dims(other, "zip_map")?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { context: "Tensor::zip_map".into(), index });
        }
        Ok(Self { dims: self.dims.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    /// `self += s * other` in place.
    pub(crate) fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.same_dims(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|v| v.clamp(lo, hi)).collect() }
    }

    /// Errors with the first offending index if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match first_non_finite(&self.data) {
            Some(index) => Err(Error::NonFinite { context: context.into(), index }),
            None => Ok(()),
        }
    }

    /// Maximum elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Per-channel mean of a rank-3 tensor.
    pub fn channel_means(&self) -> Result<Vec<f64>> {
        let (h, w, c) = self.hwc()?;
        let mut out = vec![0.0; c];
        for px in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (h * w) as f64;
        Ok(out.into_iter().map(|s| s / n).collect())
    }
}
