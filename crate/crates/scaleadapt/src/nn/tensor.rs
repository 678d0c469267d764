//! Dense row-major tensor used by the autodiff tape.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::types::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Dims of a 4-D tensor as (n, c, h, w).
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn from_raster(r: &Raster) -> Self {
        Tensor {
            shape: vec![1, r.channels, r.height, r.width],
            data: r.data.iter().map(|&v| F::from_f32(v)).collect(),
        }
    }

    /// Batch a list of same-sized rasters into an N x C x H x W tensor.
    pub fn from_rasters(rs: &[&Raster]) -> Self {
        let first = rs[0];
        let mut data = Vec::with_capacity(rs.len() * first.data.len());
        for r in rs {
            assert_eq!(
                (r.channels, r.height, r.width),
                (first.channels, first.height, first.width),
                "rasters in a batch must share dims"
            );
            data.extend(r.data.iter().map(|&v| F::from_f32(v)));
        }
        Tensor { shape: vec![rs.len(), first.channels, first.height, first.width], data }
    }

    /// Split a 4-D tensor into per-item rasters.
    pub fn to_rasters(&self) -> Vec<Raster> {
        let (n, c, h, w) = self.dims4();
        let item = c * h * w;
        (0..n)
            .map(|i| Raster::new(c, h, w, self.data[i * item..(i + 1) * item].iter().map(|&v| Scalar::to_f32(v)).collect()))
            .collect()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
