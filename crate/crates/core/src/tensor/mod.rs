//! Dense tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a plain value (shape + contiguous row-major data). A
//! [`Graph`] records operations on [`Var`] handles and runs the backward pass.
//! Precision is chosen per run through the [`Scalar`] trait (`f32` or `f64`).

mod graph;
mod kernels;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Graph, Var};
pub use kernels::{gemm, logsumexp_f64, Layout};

/// Run-level floating point precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

pub trait Scalar:
    Float
    + ToPrimitive
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` over strided row/column layouts.
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
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn of_f64(x: f64) -> Self {
        x as f32
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn of_f64(x: f64) -> Self {
        x
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of_f64(x)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of_f64(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of_f64(x.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

/// Row-wise softmax and log-sum-exp over the last dimension.
///
/// Both outputs are computed with max-subtraction. Returns `(probs, lse)` where
/// `lse` drops the last dimension.
pub fn softmax_logsumexp<T: Scalar>(z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if z.ndim() == 0 {
        return Err(Error::shape("softmax over a scalar"));
    }
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let v = z.last_dim();
    let rows = z.numel() / v.max(1);
    let mut probs = vec![T::zero(); z.numel()];
    let mut lse = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &z.data[r * v..(r + 1) * v];
        lse[r] = kernels::softmax_row(row, &mut probs[r * v..(r + 1) * v]);
    }
    let lse_shape = z.shape[..z.ndim() - 1].to_vec();
    Ok((Tensor::new(z.shape.clone(), probs)?, Tensor::new(lse_shape, lse)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn uniform_logits() {
        let z = Tensor::<f64>::from_f64(vec![2], &[0.0, 0.0]).unwrap();
        let (p, lse) = softmax_logsumexp(&z).unwrap();
        assert_eq!(p.data, vec![0.5, 0.5]);
        assert!((lse.data[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = Tensor::<f32>::from_f64(vec![2], &[1000.0, 0.0]).unwrap();
        let (p, lse) = softmax_logsumexp(&z).unwrap();
        assert!((p.data[0] - 1.0).abs() < 1e-6);
        assert!(p.data[1] < 1e-30);
        assert!((lse.data[0] - 1000.0).abs() < 1e-3);
        assert!(lse.is_finite());
    }

    #[test]
    fn non_finite_is_rejected() {
        let z = Tensor::<f64>::from_f64(vec![2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_logsumexp(&z), Err(Error::Numeric(_))));
    }
}
