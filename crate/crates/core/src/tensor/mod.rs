//! Dense row-major tensors, the kernels the transformer needs, a tape-based
//! reverse-mode graph and the AdamW optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit
//! storage for training and in 64-bit for finite-difference verification.

pub mod graph;
pub mod kernels;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamWConfig, OptimizerState};

pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided `m×k` and `k×n` operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn strided_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= strided_extent(m, k, rsa, csa));
                assert!(b.len() >= strided_extent(k, n, rsb, csb));
                assert!(c.len() >= strided_extent(m, n, rsc, csc));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above; strides are non-negative so every
                // accessed element lies inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A shaped array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Product of all dimensions but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", format!("{} vs {}", g.len(), self.data.len())));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += *v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || other.shape.len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        Tensor::new(shape, kernels::matmul(&self.data, &other.data, m, k, n))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| *v * s).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenation along the last dimension.
    pub fn concat(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rows() != other.rows() || self.shape.len() != other.shape.len() {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = kernels::concat_cols(&self.data, &other.data, self.rows(), self.cols(), other.cols());
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") += other.cols();
        Tensor::new(shape, data)
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.cols() {
            return Err(Error::shape("slice", format!("{start}+{len} > {}", self.cols())));
        }
        let data = kernels::slice_cols(&self.data, self.rows(), self.cols(), start, len);
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = len;
        Tensor::new(shape, data)
    }

    pub fn gelu(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| kernels::gelu(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: kernels::softmax_rows(&self.data, self.rows(), self.cols()),
            requires_grad: false,
            grad: None,
        }
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cols();
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape("layer_norm", format!("{c} columns, gain {:?}", gain.shape)));
        }
        let (y, _, _) = kernels::layer_norm(&self.data, self.rows(), c, &gain.data, &bias.data);
        Tensor::new(self.shape.clone(), y)
    }
}
