//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! Everything in the models is expressed with the primitives in [`Graph`]:
//! matmul, add (with row-bias broadcast), multiply, concat, exp, sigmoid,
//! relu, softplus, softmax, layer norm, dropout and scale, plus the few
//! reductions a loss needs. Values are row-major and at most two-dimensional
//! as far as the primitives are concerned.

pub mod gradcheck;
mod graph;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use gradcheck::{grad_check, primitive_suite, GradCheck, GradCheckReport, PrimitiveCheck};
pub use graph::{Bindings, Gradients, Graph, Mode, Var};
pub use params::{ParamKind, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor shape {0:?} must be non-empty with positive extents")]
    BadShape(Vec<usize>),
    #[error("{op}: expected a tensor of rank <= 2, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for a matrix")]
    Axis { op: &'static str, axis: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Floating-point element type: `f64` for checks and evaluation, `f32` is
/// allowed for training throughput.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c <- alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every strided index reachable from the given dimensions must be in
    /// bounds of the corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major dense tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::BadShape(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, T::zero())
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

    /// Interprets the tensor as a matrix; rank-1 tensors are row vectors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericsError::Rank {
                op: "dims2",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        let cols = *self.shape.last().expect("non-empty shape");
        self.data[row * cols + col]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::matrix(c, r, out)
    }

    /// Sum of squares of all entries.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `op(a) * op(b)` where `op` optionally transposes, without copying.
pub(crate) fn matmul_t<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    // SAFETY: dims2 guarantees a is ar*ac and b is br*bc elements; the strides
    // above address exactly those buffers, and out holds m*n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}
