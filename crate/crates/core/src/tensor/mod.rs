//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Storage is `f32` for training; every kernel is generic over [`Float`] so
//! the same model code can be re-run in `f64` when checking gradients.

mod graph;
pub mod io;
pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use graph::{Gradients, Graph, Var};

use crate::error::{dim_err, Result};

/// Scalar type usable as tensor element.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense tensor. `shape.iter().product() == data.len()` always holds and
/// every dimension is at least one.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err(format!("invalid shape {shape:?}: dimensions must be >= 1"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[F] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    /// Copying reshape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<F: Float> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
