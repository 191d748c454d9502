//! Minimal reverse-mode autodiff engine sized for the agents in this crate.
//!
//! The design is define-by-run: every training step builds a fresh [`Tape`],
//! runs the forward ops it needs, calls [`Tape::backward`] once, and drops the
//! tape. Training runs in `f32`; the whole engine is generic over [`Element`]
//! so gradient tests can run the identical code path in `f64` against central
//! finite differences.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod serialize;
pub mod tape;

use std::fmt::{Debug, Display};
use std::sync::Arc;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use nn::{Conv2dLayer, LayerNorm, LayerParams, Linear, NoisyLinear, ParamMode};
pub use tape::Tape;

/// Scalar element type of a tensor: `f32` for training, `f64` for gradient
/// verification.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).unwrap()
    }
    fn of_f32(v: f32) -> Self {
        num_traits::FromPrimitive::from_f32(v).unwrap()
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// A shaped, immutable view of a flat buffer. Cheap to clone (the buffer is
/// shared); ops always allocate fresh outputs.
#[derive(Clone, Debug)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    /// Handle into the active tape, present only while a recording op chain
    /// is alive. `None` means constant: no gradient flows into this tensor.
    pub(crate) node: Option<usize>,
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    pub fn from_f32_slice(data: &[f32], shape: &[usize]) -> Self {
        Tensor::new(data.iter().map(|&v| E::of_f32(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Copy of this tensor with the tape link severed; gradients stop here.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// View the same buffer under a new shape. The tape link is preserved:
    /// gradients are tracked on flat buffers, so a reshape is free.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape to {:?} changes element count {}",
            shape,
            self.data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: self.node,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<E>>, node: Option<usize>) -> Self {
        Tensor { shape, data, node }
    }
}

pub(crate) fn assert_finite<E: Element>(data: &[E], op: &'static str) {
    if cfg!(debug_assertions) {
        for v in data {
            assert!(
                v.is_finite(),
                "non-finite value {v} produced by op {op} on finite inputs"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_matches_buffer() {
        let t = Tensor::<f32>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f32>::new(vec![1.0, 2.0], &[3]);
    }

    #[test]
    fn detach_severs_node() {
        let t = Tensor::<f32>::scalar(2.0);
        assert!(!t.detach().is_tracked());
    }
}
