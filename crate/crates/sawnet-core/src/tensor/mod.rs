//! Dense tensors and reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus a shape. Buffers are
//! shared through `Arc`, so cloning a tensor or saving it for a backward
//! rule never copies data. Differentiation is tape based: see [`Tape`].

mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use gradcheck::{finite_diff, max_rel_err, rel_err, GradCheck};
pub use tape::{GradientMap, NodeId, Tape};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type tag, used by checkpoints and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Version(format!("unknown dtype {other:?}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar types the engine runs on. f32 is the training dtype; f64 exists so
/// gradient checks can out-resolve finite-difference noise.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Exact little-endian byte round trip; checkpoints depend on it.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_node() -> NodeId {
    NodeId(NEXT_NODE.fetch_add(1, Ordering::Relaxed))
}

/// Immutable dense tensor. Shape is row major; the last axis is contiguous.
///
/// `node` identifies the tensor to a [`Tape`]. Plain tensors (inputs,
/// constants, masks) carry no node and behave as constants under
/// differentiation; tensors made with [`Tensor::param`] keep a stable node id
/// across forward passes, which is what lets an optimizer look its gradient
/// up pass after pass.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
    node: Option<NodeId>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "tensor::new",
                msg: format!("shape wants {numel} elements, data has {}", data.len()),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            node: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v].into(),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel].into(),
            node: None,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel].into(),
            node: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect::<Vec<_>>().into(),
            node: None,
        }
    }

    /// A trainable leaf: same as [`Tensor::new`] but with a fresh stable
    /// node id.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.node = Some(fresh_node());
        Ok(t)
    }

    /// Gives an existing tensor a fresh node id, making it a leaf.
    pub fn as_leaf(&self) -> Self {
        let mut t = self.clone();
        t.node = Some(fresh_node());
        t
    }

    /// Replaces the buffer, keeping shape and node id. This is how the
    /// optimizer steps a parameter without changing its identity.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::BadShape {
                op: "tensor::with_data",
                msg: format!("expected {} elements, got {}", self.data.len(), data.len()),
                shape: self.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: data.into(),
            node: self.node,
        })
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<T>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            node,
        }
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on a tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Extent of the last axis; 1 for rank-0.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.shape)?;
        if self.data.len() <= 12 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Integer companion to [`Tensor`], used for argmax results and similar
/// index-valued outputs. Not differentiable.
#[derive(Clone, Debug)]
pub struct IndexTensor {
    shape: Vec<usize>,
    data: Arc<[usize]>,
}

impl IndexTensor {
    pub fn new(shape: &[usize], data: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "index_tensor::new",
                msg: format!("shape wants {numel} elements, data has {}", data.len()),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub(crate) fn share(&self) -> Arc<[usize]> {
        Arc::clone(&self.data)
    }
}
