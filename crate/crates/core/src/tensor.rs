//! Dense tensors: a shape plus immutable shared storage.
//!
//! Images are channel-major (C x H x W); scalars have an empty shape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense real tensor value. Storage is immutable once wrapped, so tapes and
/// concurrent solves can share it freely.
#[derive(Clone)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Real> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "data length must equal product of extents");
        TensorData {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorData {
            shape: vec![],
            data: vec![v].into(),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorData::new(shape, vec![T::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n: usize = shape.iter().product();
        TensorData::new(shape, vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same storage viewed under a different shape (no copy).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.numel()),
                format!("{:?} = {} elements", shape, n),
            ));
        }
        Ok(TensorData {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Convert elementwise to another precision.
    pub fn cast<U: Real>(&self) -> TensorData<U> {
        TensorData::new(
            self.shape.clone(),
            self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

impl<T: Real> std::fmt::Debug for TensorData<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TensorData{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

/// C x H x W shape helper.
pub fn chw(c: usize, h: usize, w: usize) -> Vec<usize> {
    vec![c, h, w]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_storage() {
        let t = TensorData::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn non_finite_detection() {
        let t = TensorData::<f32>::new(vec![3], vec![1.0, f32::NAN, 2.0]);
        assert_eq!(t.first_non_finite(), Some(1));
        let ok = TensorData::<f32>::new(vec![2], vec![1.0, 2.0]);
        assert_eq!(ok.first_non_finite(), None);
    }
}
