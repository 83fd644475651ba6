//! A small reverse-mode automatic differentiation engine.
//!
//! Operations are recorded on a [`Graph`] (the tape) in execution order and
//! every node keeps the forward values its backward rule needs. A single
//! reverse sweep from a scalar root visits each recorded node once and
//! accumulates gradients into its operands; a tensor used several times
//! receives the sum of its contributions.
//!
//! The engine is generic over [`Scalar`]: training runs in `f32` (with SIMD
//! convolution kernels on x86-64) and gradient checks run in `f64`.
//!
//! Volumetric tensors have shape `[N, C, X, Y, Z]` with the spatial block
//! laid out `x`-fastest, matching [`crate::volume::Volume`]. Dense tensors
//! have shape `[N, F]`.

mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod param;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::Padding;
pub use graph::{Gradients, Graph, Var};
pub use layers::{BatchStats, BnMode};
pub use param::{adam_step, AdamConfig, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("conv3d: kernel {kernel} larger than input extent {extent} under valid padding")]
    KernelTooLarge { kernel: usize, extent: usize },
    #[error("conv3d: same padding needs an odd kernel, got {0}")]
    EvenKernel(usize),
    #[error("maxpool3d: spatial dims {0:?} must all be even")]
    OddPoolDims([usize; 3]),
    #[error("batchnorm3d: train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(String),
}

/// Floating-point element type of the engine.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Frame correlation; see [`kernels::corr_frame_generic`].
    #[allow(clippy::too_many_arguments)]
    fn corr_frame(
        x: &[Self],
        xlen: usize,
        cin: usize,
        w: &[Self],
        cout: usize,
        offs: &[usize],
        plen: usize,
        out: &mut [Self],
    ) {
        kernels::corr_frame_generic(x, xlen, cin, w, cout, offs, plen, out)
    }

    /// Frame weight gradient; see [`kernels::corr_wgrad_frame_generic`].
    #[allow(clippy::too_many_arguments)]
    fn corr_wgrad_frame(
        x: &[Self],
        xlen: usize,
        cin: usize,
        dy: &[Self],
        cout: usize,
        offs: &[usize],
        plen: usize,
        dw: &mut [Self],
    ) {
        kernels::corr_wgrad_frame_generic(x, xlen, cin, dy, cout, offs, plen, dw)
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn of_f32(v: f32) -> Self {
        Self::of(v as f64)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f64().unwrap_or(f64::NAN) as f32
    }
}

impl Scalar for f64 {}

impl Scalar for f32 {
    fn corr_frame(
        x: &[f32],
        xlen: usize,
        cin: usize,
        w: &[f32],
        cout: usize,
        offs: &[usize],
        plen: usize,
        out: &mut [f32],
    ) {
        kernels::corr_frame_f32(x, xlen, cin, w, cout, offs, plen, out)
    }

    fn corr_wgrad_frame(
        x: &[f32],
        xlen: usize,
        cin: usize,
        dy: &[f32],
        cout: usize,
        offs: &[usize],
        plen: usize,
        dw: &mut [f32],
    ) {
        kernels::corr_wgrad_frame_f32(x, xlen, cin, dy, cout, offs, plen, dw)
    }

    #[inline]
    fn of_f32(v: f32) -> Self {
        v
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

/// An N-dimensional dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, GraphError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(GraphError::Shape { op: "tensor", detail: format!("invalid shape {shape:?}") });
        }
        let n = shape.iter().product::<usize>();
        if n != data.len() {
            return Err(GraphError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self, GraphError> {
        Self::new(shape, data.iter().map(|&v| T::of_f32(v)).collect())
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

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

/// Spatial dims of a `[N, C, X, Y, Z]` shape.
pub(crate) fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}
