//! Dense row-major tensors and the primitive numeric operations.

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Seeded pseudo-random generator.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the
/// algorithm and identical on every platform. `for_stream` selects one of
/// 2^64 independent streams under the same seed, which is how per-sample
/// generation stays a pure function of `(seed, index)`.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw on `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw on `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer on `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    /// Fisher-Yates shuffle driven by this generator.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EwiseOp {
    Add,
    Mul,
    Relu,
    /// Multiply every element by a constant.
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("rank must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Kaiming-uniform draw: i.i.d. on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        if fan_in == 0 {
            return Err(Error::InvalidShape("fan_in must be at least 1".into()));
        }
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform draw on `[lo, hi]`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out)
    }

    /// Elementwise operation. Binary ops accept an operand of identical
    /// shape or a single-element operand broadcast as a scalar.
    pub fn ewise(&self, op: EwiseOp, other: Option<&Self>) -> Result<Self> {
        let data = match op {
            EwiseOp::Relu => self
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            EwiseOp::Scale(s) => {
                let s = T::from_f64(s);
                self.data.iter().map(|&v| v * s).collect()
            }
            EwiseOp::Add | EwiseOp::Mul => {
                let other = other.ok_or_else(|| Error::Shape("binary elementwise op needs a second operand".into()))?;
                let f = |a: T, b: T| if op == EwiseOp::Add { a + b } else { a * b };
                if other.shape == self.shape {
                    self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()
                } else if other.numel() == 1 {
                    let b = other.data[0];
                    self.data.iter().map(|&a| f(a, b)).collect()
                } else if self.numel() == 1 {
                    return other.ewise(op, Some(self));
                } else {
                    return Err(Error::Shape(format!(
                        "elementwise operands {:?} and {:?}",
                        self.shape, other.shape
                    )));
                }
            }
        };
        Self::new(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ewise(EwiseOp::Add, Some(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.ewise(EwiseOp::Mul, Some(other))
    }

    pub fn relu(&self) -> Self {
        self.ewise(EwiseOp::Relu, None).expect("unary op keeps shape")
    }

    pub fn scale(&self, s: f64) -> Self {
        self.ewise(EwiseOp::Scale(s), None).expect("unary op keeps shape")
    }

    /// Reduces over `axes`, removing them. Reducing every axis yields a
    /// single-element tensor of shape `[1]`.
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::Shape(format!("axis {a} out of range for rank {rank}")));
            }
            if reduced[a] {
                return Err(Error::Shape(format!("axis {a} repeated")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| self.shape[i]).collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_n: usize = out_shape.iter().product();
        // Sums accumulate in f64 so means of constants stay within an ulp.
        let init = match kind {
            ReduceKind::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_n];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for i in 0..rank {
                if !reduced[i] {
                    o = o * self.shape[i] + idx[i];
                }
            }
            let v = v.as_f64();
            out[o] = match kind {
                ReduceKind::Max => out[o].max(v),
                _ => out[o] + v,
            };
            for i in (0..rank).rev() {
                idx[i] += 1;
                if idx[i] < self.shape[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        if kind == ReduceKind::Mean {
            let count = (self.numel() / out_n) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        Self::new(&out_shape, out.into_iter().map(T::from_f64).collect())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}
