//! Dense rank-5 arrays in (N, C, D, H, W) layout.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar type of a computation graph. `f64` is used for gradient checks and
/// tests, `f32` for training runs; the two are never mixed within a graph.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` when `accumulate`) for row-major
    /// `a: m×k` and `b: k×n`. A transposed operand is stored row-major in its
    /// transposed shape.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> [isize; 6] {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize, n as isize, 1]
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const BYTES: usize = std::mem::size_of::<$t>();
            const NAME: &'static str = $name;

            #[inline]
            fn cast(v: f64) -> Self {
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
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, a_trans, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths were checked against the
                // m×k, k×n and m×n extents addressed by these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Extents `(N, C, D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape([n, c, d, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }
    pub fn voxels(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    /// Element count, or `None` if it overflows `usize`.
    pub fn checked_numel(&self) -> Option<usize> {
        self.0.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e))
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    #[inline]
    pub fn flatten(&self, idx: [usize; 5]) -> usize {
        let [_, c, d, h, w] = self.0;
        (((idx[0] * c + idx[1]) * d + idx[2]) * h + idx[3]) * w + idx[4]
    }

    pub fn unflatten(&self, mut flat: usize) -> [usize; 5] {
        let mut idx = [0; 5];
        for axis in (0..5).rev() {
            let e = self.0[axis];
            idx[axis] = flat % e;
            flat /= e;
        }
        idx
    }

    pub fn with_batch(&self, n: usize) -> Shape {
        Shape([n, self.0[1], self.0[2], self.0[3], self.0[4]])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, d, h, w] = self.0;
        write!(f, "({n}, {c}, {d}, {h}, {w})")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn check_alloc<T>(shape: Shape) -> Result<usize> {
    let numel = shape
        .checked_numel()
        .ok_or_else(|| Error::Allocation(format!("element count of {shape} overflows")))?;
    let bytes = numel.checked_mul(std::mem::size_of::<T>().max(1));
    match bytes {
        Some(b) if b <= isize::MAX as usize => Ok(numel),
        _ => Err(Error::Allocation(format!("{shape} exceeds addressable memory"))),
    }
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        let numel = check_alloc::<T>(shape)?;
        Ok(Self {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
        })
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        let numel = check_alloc::<T>(shape)?;
        Ok(Self {
            shape,
            data: vec![value; numel],
            grad: None,
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let numel = check_alloc::<T>(shape)?;
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "{shape} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// I.i.d. normal draws.
    pub fn randn(shape: Shape, rng: &mut Rng, mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Argument(format!(
                "randn needs finite mean and std >= 0, got mean={mean} std={std}"
            )));
        }
        let numel = check_alloc::<T>(shape)?;
        let data = (0..numel)
            .map(|_| T::cast(mean + std * rng.normal()))
            .collect();
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn uniform(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Result<Self> {
        let numel = check_alloc::<T>(shape)?;
        let data = (0..numel).map(|_| T::cast(rng.uniform_range(lo, hi))).collect();
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.shape.flatten(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let i = self.shape.flatten(idx);
        self.data[i] = v;
    }

    /// Contiguous slice for batch element `n`, channel `c`.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let vox = self.shape.voxels();
        let start = (n * self.shape.c() + c) * vox;
        &self.data[start..start + vox]
    }

    /// Contiguous slice holding all channels of batch element `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.shape.c() * self.shape.voxels();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.shape.c() * self.shape.voxels();
        &mut self.data[n * per..(n + 1) * per]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.checked_numel() != Some(self.data.len()) {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// The gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape,
                right: other.shape,
            });
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn zeros_cases() {
        let t = Tensor5::<f64>::zeros(Shape::new(1, 1, 1, 1, 1)).unwrap();
        assert_eq!(t.data(), &[0.0]);
        assert!(t.grad().is_none());
        let t = Tensor5::<f64>::zeros(Shape::new(2, 1, 1, 1, 3)).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = Tensor5::<f32>::zeros(Shape::new(1, 0, 4, 4, 4)).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn zeros_overflow_is_allocation_error() {
        let huge = Shape::new(usize::MAX, 2, 1, 1, 1);
        assert!(matches!(Tensor5::<f32>::zeros(huge), Err(Error::Allocation(_))));
        let big = Shape::new(1 << 20, 1 << 20, 1 << 20, 1, 1);
        assert!(matches!(Tensor5::<f64>::zeros(big), Err(Error::Allocation(_))));
    }

    #[test]
    fn randn_degenerate_and_deterministic() {
        let s = Shape::new(1, 2, 3, 3, 3);
        let t = Tensor5::<f64>::randn(s, &mut Rng::new(1), 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
        let a = Tensor5::<f64>::randn(s, &mut Rng::new(7), 0.0, 1.0).unwrap();
        let b = Tensor5::<f64>::randn(s, &mut Rng::new(7), 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            Tensor5::<f64>::randn(s, &mut Rng::new(1), 0.0, -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn randn_moments() {
        let t = Tensor5::<f64>::randn(Shape::new(1, 1, 1, 1, 100_000), &mut Rng::new(11), 0.0, 1.0)
            .unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn elementwise_identities() {
        let s = Shape::new(2, 3, 2, 2, 2);
        let x = Tensor5::<f64>::randn(s, &mut Rng::new(5), 0.0, 1.0).unwrap();
        let zeros = Tensor5::zeros(s).unwrap();
        let ones = Tensor5::full(s, 1.0).unwrap();
        assert_eq!(x.add(&zeros).unwrap(), x);
        assert_eq!(x.mul(&ones).unwrap(), x);
        assert_eq!(x.sub(&x).unwrap(), zeros);
        assert_eq!(x.add_scalar(0.0), x);
        assert_eq!(x.mul_scalar(1.0), x);
    }

    #[test]
    fn shape_mismatch_lists_both_shapes() {
        let a = Tensor5::<f64>::zeros(Shape::new(1, 1, 2, 2, 2)).unwrap();
        let b = Tensor5::<f64>::zeros(Shape::new(1, 2, 2, 2, 2)).unwrap();
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("(1, 1, 2, 2, 2)") && msg.contains("(1, 2, 2, 2, 2)"), "{msg}");
    }

    #[test]
    fn flat_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5, 6);
        assert_eq!(s.flatten([0, 0, 0, 0, 1]), 1);
        assert_eq!(s.flatten([0, 0, 0, 1, 0]), 6);
        assert_eq!(s.flatten([1, 0, 0, 0, 0]), 3 * 4 * 5 * 6);
    }

    proptest! {
        #[test]
        fn flatten_round_trip(ext in prop::array::uniform5(1usize..6), seed in any::<u64>()) {
            let s = Shape(ext);
            let mut r = Rng::new(seed);
            let idx: [usize; 5] = std::array::from_fn(|a| (r.next_u64() as usize) % ext[a]);
            prop_assert_eq!(s.unflatten(s.flatten(idx)), idx);
        }
    }
}
