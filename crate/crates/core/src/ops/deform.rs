//! Deformable 3D convolution.
//!
//! An auxiliary convolution with the same kernel geometry predicts, for every
//! output location and every kernel tap, a fractional displacement
//! `(Δd, Δh, Δw)` of that tap. The main kernel is then applied to the input
//! sampled trilinearly at the displaced positions:
//!
//! ```text
//! y(p₀) = b + Σₙ wₙ · x(p₀·stride − pad + pₙ·dilation + Δpₙ(p₀))
//! ```
//!
//! Offsets are shared across input and output channels. The offset map has
//! `3·K` channels (`K = kD·kH·kW`) laid out as `(Δd, Δh, Δw)` per tap, taps in
//! row-major kernel order. With all offsets zero the sampled columns equal the
//! regular vol2col columns exactly, so the output is bitwise identical to
//! [`conv3d_forward`].

use serde::{Deserialize, Serialize};

use super::conv::{apply_columns, check_params, columns_backward, conv3d_backward, conv3d_forward, ConvSpec};
use super::trilinear::Cell;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformableConvSpec {
    pub base: ConvSpec,
}

impl DeformableConvSpec {
    pub fn new(base: ConvSpec) -> Self {
        Self { base }
    }

    /// `3·kD·kH·kW`.
    pub fn offset_channels(&self) -> usize {
        3 * self.base.taps()
    }

    /// The offset predictor: same kernel, stride, padding and dilation as the
    /// base convolution so its output grid coincides with the base output grid.
    pub fn offset_predictor(&self) -> ConvSpec {
        ConvSpec {
            out_channels: self.offset_channels(),
            ..self.base
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeformGrads<T> {
    pub grad_x: Tensor5<T>,
    pub grad_weight: Tensor5<T>,
    pub grad_bias: Vec<T>,
    pub grad_offset_weight: Tensor5<T>,
    pub grad_offset_bias: Vec<T>,
}

fn tap_query<T: Real>(spec: &ConvSpec, o: [usize; 3], tap: [usize; 3], off: &[T], t: usize, l: usize, len: usize) -> [T; 3] {
    let p = spec.tap_origin(o, tap);
    std::array::from_fn(|a| T::cast(p[a] as f64) + off[(3 * t + a) * len + l])
}

fn for_each_location(out: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut l = 0;
    for od in 0..out[0] {
        for oh in 0..out[1] {
            for ow in 0..out[2] {
                f(l, [od, oh, ow]);
                l += 1;
            }
        }
    }
}

/// Column buffer of one batch element sampled at displaced tap positions.
/// `offsets` is that element's `(3K, L)` offset map.
pub(crate) fn deformable_im2col<T: Real>(
    x: &[T],
    dims: [usize; 3],
    spec: &ConvSpec,
    out: [usize; 3],
    offsets: &[T],
    col: &mut [T],
) {
    let vox = dims.iter().product::<usize>();
    let len = out.iter().product::<usize>();
    let k = spec.taps();
    for (t, tap) in spec.tap_iter().enumerate() {
        for_each_location(out, |l, o| {
            let cell = Cell::new(tap_query(spec, o, tap, offsets, t, l, len), dims);
            for c in 0..spec.in_channels {
                col[(c * k + t) * len + l] = cell.sample(&x[c * vox..(c + 1) * vox]);
            }
        });
    }
}

fn check_offset_params<T: Real>(
    offset_weight: &Tensor5<T>,
    offset_bias_len: usize,
    spec: &DeformableConvSpec,
) -> Result<()> {
    let pred = spec.offset_predictor();
    if offset_weight.shape() != pred.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "deformable offset weight",
            left: offset_weight.shape(),
            right: pred.weight_shape(),
        });
    }
    if offset_bias_len != pred.out_channels {
        return Err(Error::Shape(format!(
            "offset bias has {offset_bias_len} entries, expected {}",
            pred.out_channels
        )));
    }
    Ok(())
}

/// Applies the main kernel given an already predicted offset map.
pub fn deformable_conv3d_apply<T: Real>(
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: &[T],
    offsets: &Tensor5<T>,
    spec: &DeformableConvSpec,
) -> Result<Tensor5<T>> {
    let base = &spec.base;
    let out_shape = check_params(x.shape(), weight, bias.len(), base)?;
    let [od, oh, ow] = out_shape.spatial();
    let expected = Shape::new(out_shape.n(), spec.offset_channels(), od, oh, ow);
    if offsets.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "deformable offsets",
            left: offsets.shape(),
            right: expected,
        });
    }
    let out = out_shape.spatial();
    let len = out_shape.voxels();
    let ck = base.in_channels * base.taps();
    let mut y = Tensor5::zeros(out_shape)?;
    let mut col = vec![T::zero(); ck * len];
    for n in 0..x.shape().n() {
        deformable_im2col(x.sample(n), x.shape().spatial(), base, out, offsets.sample(n), &mut col);
        apply_columns(weight.data(), bias, &col, ck, len, y.sample_mut(n));
    }
    Ok(y)
}

/// Returns the output and the predicted offset field `(N, 3K, D', H', W')`.
pub fn deformable_conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: &[T],
    offset_weight: &Tensor5<T>,
    offset_bias: &[T],
    spec: &DeformableConvSpec,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    check_offset_params(offset_weight, offset_bias.len(), spec)?;
    let offsets = conv3d_forward(x, offset_weight, offset_bias, &spec.offset_predictor())?;
    debug_assert!(offsets.is_finite(), "offset field contains non-finite values");
    let y = deformable_conv3d_apply(x, weight, bias, &offsets, spec)?;
    Ok((y, offsets))
}

/// Gradients through both the sampled values and the sampling positions;
/// the latter flow into the offset predictor.
pub fn deformable_conv3d_backward<T: Real>(
    grad_out: &Tensor5<T>,
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    offset_weight: &Tensor5<T>,
    offsets: &Tensor5<T>,
    spec: &DeformableConvSpec,
) -> Result<DeformGrads<T>> {
    let base = &spec.base;
    check_offset_params(offset_weight, spec.offset_channels(), spec)?;
    let out_shape = check_params(x.shape(), weight, base.out_channels, base)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv3d_backward",
            left: grad_out.shape(),
            right: out_shape,
        });
    }
    if offsets.shape().c() != spec.offset_channels() || offsets.shape().spatial() != out_shape.spatial() {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv3d_backward offsets",
            left: offsets.shape(),
            right: out_shape,
        });
    }
    let dims = x.shape().spatial();
    let vox = x.shape().voxels();
    let out = out_shape.spatial();
    let len = out_shape.voxels();
    let k = base.taps();
    let ck = base.in_channels * k;

    let mut grad_x = Tensor5::zeros(x.shape())?;
    let mut grad_weight = Tensor5::zeros(weight.shape())?;
    let mut grad_bias = vec![T::zero(); base.out_channels];
    let mut grad_offsets = Tensor5::zeros(offsets.shape())?;
    let mut col = vec![T::zero(); ck * len];
    let mut grad_col = vec![T::zero(); ck * len];

    for n in 0..x.shape().n() {
        let xn = x.sample(n);
        let off = offsets.sample(n);
        deformable_im2col(xn, dims, base, out, off, &mut col);
        columns_backward(
            grad_out.sample(n),
            weight.data(),
            &col,
            ck,
            len,
            grad_weight.data_mut(),
            &mut grad_bias,
            &mut grad_col,
        );
        let gxn = grad_x.sample_mut(n);
        let gon = grad_offsets.sample_mut(n);
        for (t, tap) in base.tap_iter().enumerate() {
            for_each_location(out, |l, o| {
                let cell = Cell::new(tap_query(base, o, tap, off, t, l, len), dims);
                let mut gq = [T::zero(); 3];
                for c in 0..base.in_channels {
                    let g = grad_col[(c * k + t) * len + l];
                    if g == T::zero() {
                        continue;
                    }
                    let range = c * vox..(c + 1) * vox;
                    let d = cell.grad_q(&xn[range.clone()], g);
                    for a in 0..3 {
                        gq[a] += d[a];
                    }
                    cell.scatter(g, &mut gxn[range]);
                }
                for a in 0..3 {
                    gon[(3 * t + a) * len + l] = gq[a];
                }
            });
        }
    }

    let pred = conv3d_backward(&grad_offsets, x, offset_weight, &spec.offset_predictor())?;
    grad_x.add_assign(&pred.grad_x)?;
    Ok(DeformGrads {
        grad_x,
        grad_weight,
        grad_bias,
        grad_offset_weight: pred.grad_weight,
        grad_offset_bias: pred.grad_bias,
    })
}
