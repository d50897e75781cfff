//! Dense row-major tensor value type.

use rand::Rng;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense tensor: a shape (list of positive extents) and row-major storage.
///
/// The element count always equals the product of the extents; constructors
/// enforce this. Scalars are represented as shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and matching row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", "shape must have at least one extent"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; numel] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Samples a tensor from a normal distribution with the given standard
    /// deviation, re-drawing any sample beyond two standard deviations.
    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            // Box-Muller transform; both draws are used when in range.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            for z in [r * theta.cos(), r * theta.sin()] {
                if z.abs() <= 2.0 && data.len() < numel {
                    data.push(S::from_f64(z * std));
                }
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Consumes the tensor and returns its storage.
    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected 1 element, got {}", self.data.len())));
        }
        Ok(self.data[0])
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at `[row, col]` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> S {
        debug_assert_eq!(self.ndim(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Converts every element through f64 into another precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Applies `f` elementwise, producing a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Row-major matrix product of two rank-2 tensors, outside the graph.
///
/// Used where gradients are not needed: similarity matrices for negative
/// mining, evaluation scoring, the projection export.
pub fn matmul2<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul2",
            format!("incompatible shapes {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![S::ZERO; m * n];
    matmul_kernel(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Accumulating matmul kernel over contiguous row-major slices.
///
/// The i-k-j loop order walks both `b` and `out` row-contiguously, which lets
/// the compiler vectorize the inner loop.
pub(crate) fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}
