//! Dense rank-4 tensors in `[batch, channel, height, width]` row-major layout
//! and the reverse-mode differentiation graph built on top of them.

mod graph;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
pub mod optim;
mod scalar;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use graph::{BinaryKind, Graph, PoolKind, UpsampleMode, Var};
pub use scalar::{DType, Scalar};

/// Extents of a rank-4 tensor, `[B, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }

    pub fn b(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn with_c(&self, c: usize) -> Shape {
        Shape([self.b(), c, self.h(), self.w()])
    }

    pub fn with_hw(&self, h: usize, w: usize) -> Shape {
        Shape([self.b(), self.c(), h, w])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "[{b},{c},{h},{w}]")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// A dense value-semantic tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {shape} ({} expected)", data.len(), shape.numel()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(b, c, h, w)` at every index.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let [nb, nc, nh, nw] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..nb {
            for c in 0..nc {
                for h in 0..nh {
                    for w in 0..nw {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Shape>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    /// Uniform entries in `[low, high)`.
    pub fn rand_uniform(shape: impl Into<Shape>, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| T::lit(rng.gen_range(low..high))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, nc, nh, nw] = self.shape.0;
        ((b * nc + c) * nh + h) * nw + w
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.index(b, c, h, w);
        self.data[i] = value;
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Batch item `b` as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let per = self.shape.numel() / self.shape.b().max(1);
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stacks `[1, C, H, W]`-compatible tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_batch of zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.0[1..] != s.0[1..] {
                return Err(Error::shape("stack_batch", format!("{} vs {}", t.shape, s)));
            }
            batch += t.shape.b();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, s.c(), s.h(), s.w()),
            data,
        })
    }

    /// Sum accumulated in `f64` regardless of `T`.
    pub fn sum(&self) -> T {
        T::lit(self.data.iter().fold(0.0, |acc, &x| acc + x.as_f64()))
    }

    pub fn sum_sq(&self) -> T {
        T::lit(self.data.iter().fold(0.0, |acc, &x| acc + x.as_f64() * x.as_f64()))
    }

    pub fn norm_l2(&self) -> T {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// `‖self − other‖∞`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |b, c, h, w| (b * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.index(0, 0, 0, 1), 1);
        assert_eq!(t.index(0, 1, 0, 0), 20);
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([1, 2, 2, 2], 2.0);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.batch_item(1), b);
    }
}
