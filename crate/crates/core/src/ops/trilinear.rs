//! Trilinear sampling of a single (batch, channel) volume at fractional
//! voxel coordinates, with zero values outside the volume.
//!
//! Derivatives use the right-continuous cell `[⌊q⌋, ⌊q⌋ + 1)` on each axis.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor5};

const OUTSIDE: usize = usize::MAX;

/// The eight lattice corners enclosing a query point. Corner `i` has depth
/// bit `i >> 2`, height bit `(i >> 1) & 1` and width bit `i & 1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell<T> {
    frac: [T; 3],
    index: [usize; 8],
}

impl<T: Real> Cell<T> {
    /// `q` must be finite.
    #[inline]
    pub(crate) fn new(q: [T; 3], dims: [usize; 3]) -> Self {
        let mut cell = Cell {
            frac: [T::zero(); 3],
            index: [OUTSIDE; 8],
        };
        let mut base = [0isize; 3];
        for a in 0..3 {
            // Beyond these bounds every corner is outside the volume.
            if q[a] < -T::one() || q[a] >= T::cast(dims[a] as f64) {
                return cell;
            }
            let fl = q[a].floor();
            base[a] = fl.as_f64() as isize;
            cell.frac[a] = q[a] - fl;
        }
        let [_, h, w] = dims;
        for (i, slot) in cell.index.iter_mut().enumerate() {
            let p = [
                base[0] + (i >> 2) as isize,
                base[1] + ((i >> 1) & 1) as isize,
                base[2] + (i & 1) as isize,
            ];
            if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]) {
                *slot = ((p[0] as usize) * h + p[1] as usize) * w + p[2] as usize;
            }
        }
        cell
    }

    #[inline]
    fn corners(&self, data: &[T]) -> [T; 8] {
        self.index
            .map(|i| if i == OUTSIDE { T::zero() } else { data[i] })
    }

    /// Nested lerps along w, h, d, each clamped to its endpoints so the result
    /// stays inside the hull of the corner values despite rounding.
    #[inline]
    pub(crate) fn sample(&self, data: &[T]) -> T {
        if self.index.iter().all(|&i| i == OUTSIDE) {
            return T::zero();
        }
        let v = self.corners(data);
        let [fd, fh, fw] = self.frac;
        let lerp = |a: T, b: T, f: T| {
            let r = a * (T::one() - f) + b * f;
            r.max(a.min(b)).min(a.max(b))
        };
        let c00 = lerp(v[0], v[1], fw);
        let c01 = lerp(v[2], v[3], fw);
        let c10 = lerp(v[4], v[5], fw);
        let c11 = lerp(v[6], v[7], fw);
        lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), fd)
    }

    #[inline]
    fn axis_weights(&self) -> [[T; 2]; 3] {
        self.frac.map(|f| [T::one() - f, f])
    }

    #[inline]
    pub(crate) fn weights(&self) -> [T; 8] {
        let w = self.axis_weights();
        std::array::from_fn(|i| w[0][i >> 2] * w[1][(i >> 1) & 1] * w[2][i & 1])
    }

    /// `grad_data[corner] += g · weight(corner)` for in-bounds corners.
    #[inline]
    pub(crate) fn scatter(&self, g: T, grad_data: &mut [T]) {
        let w = self.weights();
        for (&i, &wi) in self.index.iter().zip(&w) {
            if i != OUTSIDE {
                grad_data[i] += g * wi;
            }
        }
    }

    /// `g · ∂sample/∂q`.
    #[inline]
    pub(crate) fn grad_q(&self, data: &[T], g: T) -> [T; 3] {
        if self.index.iter().all(|&i| i == OUTSIDE) {
            return [T::zero(); 3];
        }
        let v = self.corners(data);
        let w = self.axis_weights();
        let mut out = [T::zero(); 3];
        for (i, &vi) in v.iter().enumerate() {
            let bits = [i >> 2, (i >> 1) & 1, i & 1];
            for a in 0..3 {
                let sign = if bits[a] == 1 { vi } else { -vi };
                let mut prod = sign;
                for b in 0..3 {
                    if b != a {
                        prod *= w[b][bits[b]];
                    }
                }
                out[a] += prod;
            }
        }
        out.map(|d| d * g)
    }
}

fn check_query<T: Real>(x: &Tensor5<T>, n: usize, c: usize, q: [T; 3]) -> Result<()> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!(
            "non-finite sampling coordinate {:?}",
            q.map(|v| v.as_f64())
        )));
    }
    if n >= x.shape().n() || c >= x.shape().c() {
        return Err(Error::Shape(format!(
            "batch/channel ({n}, {c}) outside {}",
            x.shape()
        )));
    }
    Ok(())
}

/// Value of `x[n, c]` at fractional coordinate `q = (d, h, w)` in voxels.
pub fn trilinear_sample<T: Real>(x: &Tensor5<T>, n: usize, c: usize, q: [T; 3]) -> Result<T> {
    check_query(x, n, c, q)?;
    Ok(Cell::new(q, x.shape().spatial()).sample(x.channel(n, c)))
}

/// Backward of [`trilinear_sample`] for cotangent `grad`: scatters into
/// `grad_x` (same shape as `x`) and returns the gradient w.r.t. `q`.
pub fn trilinear_sample_backward<T: Real>(
    grad: T,
    x: &Tensor5<T>,
    n: usize,
    c: usize,
    q: [T; 3],
    grad_x: &mut Tensor5<T>,
) -> Result<[T; 3]> {
    check_query(x, n, c, q)?;
    if grad_x.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "trilinear_sample_backward",
            left: grad_x.shape(),
            right: x.shape(),
        });
    }
    let shape = x.shape();
    let cell = Cell::new(q, shape.spatial());
    let vox = shape.voxels();
    let start = (n * shape.c() + c) * vox;
    cell.scatter(grad, &mut grad_x.data_mut()[start..start + vox]);
    Ok(cell.grad_q(x.channel(n, c), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    fn linear_field() -> Tensor5<f64> {
        let s = Shape::new(1, 1, 5, 5, 5);
        let mut x = Tensor5::zeros(s).unwrap();
        for d in 0..5 {
            for h in 0..5 {
                for w in 0..5 {
                    x.set([0, 0, d, h, w], 2.0 * d as f64 + 3.0 * h as f64 - w as f64);
                }
            }
        }
        x
    }

    #[test]
    fn reproduces_nodes() {
        let x = Tensor5::<f64>::randn(Shape::new(1, 2, 3, 4, 5), &mut Rng::new(1), 0.0, 1.0).unwrap();
        for d in 0..3 {
            for h in 0..4 {
                for w in 0..5 {
                    let q = [d as f64, h as f64, w as f64];
                    assert_eq!(trilinear_sample(&x, 0, 1, q).unwrap(), x.get([0, 1, d, h, w]));
                }
            }
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let x = Tensor5::<f64>::randn(Shape::new(1, 1, 2, 2, 2), &mut Rng::new(2), 0.0, 1.0).unwrap();
        let mean = x.data().iter().sum::<f64>() / 8.0;
        let v = trilinear_sample(&x, 0, 0, [0.5, 0.5, 0.5]).unwrap();
        assert!((v - mean).abs() < 1e-15);
    }

    #[test]
    fn exact_on_linear_field() {
        let x = linear_field();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let q = [rng.uniform_range(0.0, 4.0), rng.uniform_range(0.0, 4.0), rng.uniform_range(0.0, 4.0)];
            let v = trilinear_sample(&x, 0, 0, q).unwrap();
            let expected = 2.0 * q[0] + 3.0 * q[1] - q[2];
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn outside_reads_zero() {
        let x = Tensor5::full(Shape::new(1, 1, 3, 3, 3), 1.0f64).unwrap();
        assert_eq!(trilinear_sample(&x, 0, 0, [-1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(trilinear_sample(&x, 0, 0, [1.0, 3.0, 1.0]).unwrap(), 0.0);
        assert_eq!(trilinear_sample(&x, 0, 0, [1.0, 1.0, 1e30]).unwrap(), 0.0);
        assert_eq!(trilinear_sample(&x, 0, 0, [-1e30, 1.0, 1.0]).unwrap(), 0.0);
        // Half a voxel past the face mixes with the zero padding.
        assert_eq!(trilinear_sample(&x, 0, 0, [2.5, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(trilinear_sample(&x, 0, 0, [-0.25, 1.0, 1.0]).unwrap(), 0.75);
    }

    #[test]
    fn nan_coordinate_is_rejected() {
        let x = Tensor5::<f64>::zeros(Shape::new(1, 1, 2, 2, 2)).unwrap();
        assert!(matches!(
            trilinear_sample(&x, 0, 0, [f64::NAN, 0.0, 0.0]),
            Err(Error::NumericInput(_))
        ));
    }

    #[test]
    fn backward_on_linear_field() {
        let x = linear_field();
        let mut gx = Tensor5::zeros(x.shape()).unwrap();
        let gq = trilinear_sample_backward(0.5, &x, 0, 0, [1.3, 2.6, 0.2], &mut gx).unwrap();
        for (got, want) in gq.iter().zip([1.0, 1.5, -0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        let total: f64 = gx.data().iter().sum();
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_zero_cotangent() {
        let x = Tensor5::<f64>::randn(Shape::new(1, 1, 4, 4, 4), &mut Rng::new(4), 0.0, 1.0).unwrap();
        let mut gx = Tensor5::zeros(x.shape()).unwrap();
        let gq = trilinear_sample_backward(0.0, &x, 0, 0, [1.3, 2.7, 0.5], &mut gx).unwrap();
        assert_eq!(gq, [0.0; 3]);
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_q_matches_central_differences() {
        let x = Tensor5::<f64>::randn(Shape::new(1, 1, 4, 4, 4), &mut Rng::new(5), 0.0, 1.0).unwrap();
        let q = [1.3, 2.7, 0.5];
        let mut gx = Tensor5::zeros(x.shape()).unwrap();
        let gq = trilinear_sample_backward(1.0, &x, 0, 0, q, &mut gx).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[a] += h;
            qm[a] -= h;
            let fd = (trilinear_sample(&x, 0, 0, qp).unwrap() - trilinear_sample(&x, 0, 0, qm).unwrap()) / (2.0 * h);
            let rel = (fd - gq[a]).abs() / fd.abs().max(gq[a].abs()).max(1e-3);
            assert!(rel < 1e-6, "axis {a}: {fd} vs {}", gq[a]);
        }
    }
}
