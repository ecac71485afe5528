//! Runtime values flowing along graph edges.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::DType;

/// A typed numeric payload with an optional leading batch (time) axis.
///
/// The payload is stored row-major: `rows() * width` floats, where a row is
/// one timestep. Discrete actions are stored as their index in a width-1
/// row. Unbatched values broadcast along the batch axis of their partners.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub dtype: DType,
    pub batch: Option<usize>,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(dtype: DType, batch: Option<usize>, width: usize, data: Vec<f64>) -> Value {
        debug_assert_eq!(data.len(), batch.unwrap_or(1) * width);
        Value { dtype, batch, width, data }
    }

    pub fn scalar(x: f64) -> Value {
        Value::new(DType::R, None, 1, vec![x])
    }

    pub fn scalars(xs: Vec<f64>) -> Value {
        let b = xs.len();
        Value::new(DType::R, Some(b), 1, xs)
    }

    pub fn list(xs: Vec<f64>) -> Value {
        let w = xs.len();
        Value::new(DType::ListR, None, w, xs)
    }

    /// Discrete action index.
    pub fn index(i: usize) -> Value {
        Value::new(DType::Z, None, 1, vec![i as f64])
    }

    /// Number of rows (1 when unbatched).
    #[inline]
    pub fn rows(&self) -> usize {
        self.batch.unwrap_or(1)
    }

    #[inline]
    pub fn is_batched(&self) -> bool {
        self.batch.is_some()
    }

    /// Row `r` with broadcasting: unbatched values return their only row.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let r = if self.batch.is_some() { r } else { 0 };
        &self.data[r * self.width..(r + 1) * self.width]
    }

    /// Flat payload offset of element `(r, j)` with broadcasting along both
    /// the batch axis and a width-1 row.
    #[inline]
    pub fn offset(&self, r: usize, j: usize) -> usize {
        let r = if self.batch.is_some() { r } else { 0 };
        let j = if self.width == 1 { 0 } else { j };
        r * self.width + j
    }

    #[inline]
    pub fn at(&self, r: usize, j: usize) -> f64 {
        self.data[self.offset(r, j)]
    }

    /// Value with the same shape and dtype filled with zeros.
    pub fn zeros_like(&self) -> Value {
        Value::new(self.dtype, self.batch, self.width, vec![0.0; self.data.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same payload with the batch axis removed (`B == 1` only) or added.
    pub fn with_batch(&self, batch: Option<usize>) -> Value {
        let mut v = self.clone();
        v.batch = batch;
        v
    }
}
