use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifier of a node on the active tape.
pub type NodeId = usize;

/// Dense row-major tensor of f64 values.
///
/// Data is shared behind an `Arc`, so clones are cheap and the tape can
/// hold the same buffer it handed out. Tensors detached from any tape are
/// plain immutable values.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// One-hot row vector of length `n`.
    pub fn one_hot(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::ActionOutOfRange {
                action: index,
                num_actions: n,
            });
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(Tensor::from_vec(vec![n], v))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Mutable access to the underlying buffer. Copies if the buffer is
    /// shared (e.g. still referenced by a tape). Detaches from any tape.
    pub fn make_mut(&mut self) -> &mut [f64] {
        self.node = None;
        let buf: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        buf
    }

    /// Same values, no tape membership.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute difference between two tensors of equal shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_range_check() {
        assert!(Tensor::one_hot(3, 4).is_ok());
        assert!(matches!(
            Tensor::one_hot(4, 4),
            Err(Error::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn make_mut_detaches_and_copies_when_shared() {
        let mut a = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let b = a.clone();
        a.make_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 9.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
