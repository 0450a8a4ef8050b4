//! Pointwise activations, pooling, the linear head and the logistic loss.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor5};

pub fn relu<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its input; the derivative at 0 is taken as 0.
pub fn relu_backward<T: Real>(grad_out: &Tensor5<T>, x: &Tensor5<T>) -> Result<Tensor5<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: grad_out.shape(),
            right: x.shape(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor5::from_vec(x.shape(), data)
}

/// Mean over (D, H, W): `(N, C, D, H, W) -> (N, C, 1, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = x.shape();
    let vox = s.voxels();
    if vox == 0 {
        return Err(Error::Shape(format!("cannot pool empty volume {s}")));
    }
    let inv = T::one() / T::cast(vox as f64);
    let data = x
        .data()
        .chunks_exact(vox)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor5::from_vec(Shape::new(s.n(), s.c(), 1, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor5<T>, input_shape: Shape) -> Result<Tensor5<T>> {
    let expected = Shape::new(input_shape.n(), input_shape.c(), 1, 1, 1);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: grad_out.shape(),
            right: expected,
        });
    }
    let vox = input_shape.voxels();
    let inv = T::one() / T::cast(vox as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, vox))
        .collect();
    Tensor5::from_vec(input_shape, data)
}

fn linear_dims<T: Real>(x: &Tensor5<T>, weight: &Tensor5<T>, bias_len: usize) -> Result<(usize, usize, usize)> {
    let n = x.shape().n();
    let f = if n == 0 { 0 } else { x.len() / n };
    let o = weight.shape().n();
    if weight.len() != o * f || bias_len != o {
        return Err(Error::Shape(format!(
            "linear layer: input {} has {f} features, weight {} and bias of {bias_len}",
            x.shape(),
            weight.shape()
        )));
    }
    Ok((n, f, o))
}

/// `y = x_flat · Wᵀ + b`, where each batch element is flattened to `F`
/// features and `W` has shape `(O, F, 1, 1, 1)`.
pub fn linear<T: Real>(x: &Tensor5<T>, weight: &Tensor5<T>, bias: &[T]) -> Result<Tensor5<T>> {
    let (n, f, o) = linear_dims(x, weight, bias.len())?;
    let mut y = vec![T::zero(); n * o];
    T::gemm(n, f, o, x.data(), false, weight.data(), true, &mut y, false);
    for row in y.chunks_exact_mut(o.max(1)) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    Tensor5::from_vec(Shape::new(n, o, 1, 1, 1), y)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward<T: Real>(
    grad_out: &Tensor5<T>,
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
) -> Result<(Tensor5<T>, Tensor5<T>, Vec<T>)> {
    let o = weight.shape().n();
    let (n, f, _) = linear_dims(x, weight, o)?;
    if grad_out.len() != n * o {
        return Err(Error::Shape(format!(
            "linear_backward: cotangent {} does not match {n}x{o}",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * f];
    T::gemm(n, o, f, g, false, weight.data(), false, &mut gx, false);
    let mut gw = vec![T::zero(); o * f];
    T::gemm(o, n, f, g, true, x.data(), false, &mut gw, false);
    let mut gb = vec![T::zero(); o];
    for row in g.chunks_exact(o.max(1)) {
        gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
    }
    Ok((
        Tensor5::from_vec(x.shape(), gx)?,
        Tensor5::from_vec(weight.shape(), gw)?,
        gb,
    ))
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check_labels<T: Real>(logits: &[T], labels: &[T]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Data("loss over an empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels`, in the
/// stable form `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits<T: Real>(logits: &[T], labels: &[T]) -> Result<T> {
    check_labels(logits, labels)?;
    let total: T = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / T::cast(logits.len() as f64))
}

/// Gradient of [`bce_with_logits`] w.r.t. the logits: `(σ(z) − y) / N`.
pub fn bce_with_logits_backward<T: Real>(logits: &[T], labels: &[T]) -> Result<Vec<T>> {
    check_labels(logits, labels)?;
    let inv = T::one() / T::cast(logits.len() as f64);
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - y) * inv)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn relu_values() {
        let x = Tensor5::from_vec(Shape::new(1, 1, 1, 1, 3), vec![-1.0f64, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let g = Tensor5::full(x.shape(), 1.0).unwrap();
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn bce_saturation_and_entropy_point() {
        let loss = bce_with_logits(&[30.0f64, -30.0], &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-12);
        let loss = bce_with_logits(&[0.0f64; 4], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // Large logits must not overflow.
        let loss = bce_with_logits(&[800.0f64], &[0.0]).unwrap();
        assert!((loss - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        assert!(matches!(bce_with_logits(&[0.0f64], &[0.5]), Err(Error::Data(_))));
        assert!(matches!(bce_with_logits_backward(&[0.0f64], &[2.0]), Err(Error::Data(_))));
    }

    #[test]
    fn pool_and_linear_shapes() {
        let x = Tensor5::<f64>::randn(Shape::new(2, 3, 2, 2, 2), &mut Rng::new(1), 0.0, 1.0).unwrap();
        let p = global_avg_pool(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1, 1));
        let mean0 = x.channel(1, 2).iter().sum::<f64>() / 8.0;
        assert!((p.get([1, 2, 0, 0, 0]) - mean0).abs() < 1e-15);
        let w = Tensor5::zeros(Shape::new(1, 3, 1, 1, 1)).unwrap();
        let y = linear(&p, &w, &[0.0]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
