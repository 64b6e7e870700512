//! Dense row-major tensors of `f64`.
//!
//! Image batches use NHWC layout (`[batch, height, width, channels]`), the
//! layout every layer primitive in [`crate::ops`] expects.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {:?} has a zero dimension", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interpret as NHWC, failing for any other rank.
    pub fn nhwc(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(dim_err!("expected a rank-4 NHWC tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
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

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Extract samples `[start, start + count)` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = self.shape[0];
        if start + count > n || count == 0 {
            return Err(dim_err!("batch slice {}..{} out of range for {}", start, start + count, n));
        }
        let stride = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    /// Stack equally-shaped tensors along a new leading axis (or along the
    /// existing leading axis when every part already has one of size 1).
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| dim_err!("cannot stack zero tensors"))?;
        let inner = &first.shape;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if &p.shape != inner {
                return Err(dim_err!("stack shape mismatch: {:?} vs {:?}", p.shape, inner));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = inner.clone();
        if shape[0] == 1 && shape.len() == 4 {
            shape[0] = parts.len();
        } else {
            shape.insert(0, parts.len());
        }
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![1.0; 4]),
            Err(crate::Error::Dimension(_))
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn slice_and_stack_are_inverse() {
        let t = Tensor::from_fn(&[3, 2, 2, 1], |i| i as f64);
        let parts: Vec<Tensor> = (0..3).map(|i| t.slice_batch(i, 1).unwrap()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(Tensor::stack(&refs).unwrap(), t);
    }
}
