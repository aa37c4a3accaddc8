//! Dense row-major tensors, a Wengert-list autodiff tape, and SGD.
//!
//! Everything is generic over [`Real`] so the same kernels run in `f32` for
//! training and inference and in `f64` for finite-difference gradient checks.

mod broadcast;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

pub use broadcast::broadcast_shape;
pub use optim::{Param, ParamSet, Sgd};
pub use tape::{BinaryKind, BnStats, ElementwiseKind, Gradients, ReduceKind, Tape, UnaryKind, Var};

/// Guard added inside logarithms and normalizing denominators.
pub const EPS_GUARD: f64 = 1e-12;

/// Floating point element type.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on dense row-major buffers.
    ///
    /// `a` is `m x k` (stored `k x m` when `trans_a`), `b` is `k x n`
    /// (stored `n x k` when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($ty:ty, $kernel:path) => {
        impl Real for $ty {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: the asserts above bound every index the kernel
                // touches for the given dimensions and strides.
                unsafe {
                    $kernel(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            data: (0..len).map(&mut f).collect(),
            shape,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (extent {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

const LANES: usize = 8;

/// `sum_i a[i] * b[i]` with a fixed lane-split order that vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Sum with the same fixed lane split as [`dot`].
pub(crate) fn lane_sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + rest.iter().fold(T::zero(), |s, &v| s + v)
}

pub(crate) fn ensure_finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    // x * 0 is NaN exactly when x is infinite or NaN
    let zero = T::zero();
    let mut acc = [zero; LANES];
    let chunks = data.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l] * zero;
        }
    }
    if acc.iter().chain(rest).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}
