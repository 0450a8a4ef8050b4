//! Regular 3D convolution via vol2col + GEMM.
//!
//! The column buffer of one batch element has `C·K` rows (channel-major, then
//! kernel taps in row-major order) and `D'·H'·W'` columns, so the weight tensor
//! `(O, C, kD, kH, kW)` is directly the `O × C·K` left operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1, dilation 1 and `k/2` zero padding (extent-preserving for odd kernels).
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
            dilation: [1; 3],
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; 3];
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = [dilation; 3];
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Shape {
        let [kd, kh, kw] = self.kernel;
        Shape::new(self.out_channels, self.in_channels, kd, kh, kw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!(
                "channel counts must be positive, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(Error::Shape(format!(
                "kernel {:?}, stride {:?} and dilation {:?} must be >= 1",
                self.kernel, self.stride, self.dilation
            )));
        }
        Ok(())
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let span = (input[a] + 2 * self.padding[a]) as isize
                - (self.dilation[a] * (self.kernel[a] - 1)) as isize
                - 1;
            if span < 0 {
                return Err(Error::Shape(format!(
                    "input extent {input:?} too small for kernel {:?} (padding {:?}, dilation {:?})",
                    self.kernel, self.padding, self.dilation
                )));
            }
            out[a] = span as usize / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "input {x} has {} channels, convolution expects {}",
                x.c(),
                self.in_channels
            )));
        }
        let [d, h, w] = self.output_extent(x.spatial())?;
        Ok(Shape::new(x.n(), self.out_channels, d, h, w))
    }

    /// Input-frame position of kernel tap `(kd, kh, kw)` for output voxel
    /// `o`: `o·stride − pad + tap·dilation`.
    #[inline]
    pub(crate) fn tap_origin(&self, o: [usize; 3], tap: [usize; 3]) -> [isize; 3] {
        std::array::from_fn(|a| {
            (o[a] * self.stride[a]) as isize - self.padding[a] as isize
                + (tap[a] * self.dilation[a]) as isize
        })
    }

    /// Kernel taps in row-major order.
    pub(crate) fn tap_iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [kd, kh, kw] = self.kernel;
        (0..kd).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| [a, b, c])))
    }
}

/// Gradients of a convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor5<T>,
    pub grad_weight: Tensor5<T>,
    pub grad_bias: Vec<T>,
}

pub(crate) fn check_params<T: Real>(
    x: Shape,
    weight: &Tensor5<T>,
    bias_len: usize,
    spec: &ConvSpec,
) -> Result<Shape> {
    let out = spec.output_shape(x)?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv3d weight",
            left: weight.shape(),
            right: spec.weight_shape(),
        });
    }
    if bias_len != spec.out_channels {
        return Err(Error::Shape(format!(
            "bias has {bias_len} entries, expected {}",
            spec.out_channels
        )));
    }
    Ok(out)
}

/// Fills `col` (C·K × L) from one batch element, zero outside the volume.
pub(crate) fn im2col<T: Real>(x: &[T], dims: [usize; 3], spec: &ConvSpec, out: [usize; 3], col: &mut [T]) {
    let [d, h, w] = dims;
    let vox = d * h * w;
    let l = out.iter().product::<usize>();
    let k = spec.taps();
    for c in 0..spec.in_channels {
        let xc = &x[c * vox..(c + 1) * vox];
        for (t, tap) in spec.tap_iter().enumerate() {
            let row = &mut col[(c * k + t) * l..(c * k + t + 1) * l];
            let mut j = 0;
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    let [pd, ph, pw0] = spec.tap_origin([od, oh, 0], tap);
                    let inside = pd >= 0 && (pd as usize) < d && ph >= 0 && (ph as usize) < h;
                    for ow in 0..out[2] {
                        let pw = pw0 + (ow * spec.stride[2]) as isize;
                        row[j] = if inside && pw >= 0 && (pw as usize) < w {
                            xc[((pd as usize) * h + ph as usize) * w + pw as usize]
                        } else {
                            T::zero()
                        };
                        j += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `grad_x`.
pub(crate) fn col2im<T: Real>(col: &[T], dims: [usize; 3], spec: &ConvSpec, out: [usize; 3], grad_x: &mut [T]) {
    let [d, h, w] = dims;
    let vox = d * h * w;
    let l = out.iter().product::<usize>();
    let k = spec.taps();
    for c in 0..spec.in_channels {
        let gc = &mut grad_x[c * vox..(c + 1) * vox];
        for (t, tap) in spec.tap_iter().enumerate() {
            let row = &col[(c * k + t) * l..(c * k + t + 1) * l];
            let mut j = 0;
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    let [pd, ph, pw0] = spec.tap_origin([od, oh, 0], tap);
                    let inside = pd >= 0 && (pd as usize) < d && ph >= 0 && (ph as usize) < h;
                    for ow in 0..out[2] {
                        let pw = pw0 + (ow * spec.stride[2]) as isize;
                        if inside && pw >= 0 && (pw as usize) < w {
                            gc[((pd as usize) * h + ph as usize) * w + pw as usize] += row[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
}

/// `y = W · col + bias` for one batch element.
pub(crate) fn apply_columns<T: Real>(weight: &[T], bias: &[T], col: &[T], ck: usize, l: usize, y: &mut [T]) {
    let o = bias.len();
    T::gemm(o, ck, l, weight, false, col, false, y, false);
    for (row, &b) in y.chunks_exact_mut(l).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Accumulates `grad_weight += g · colᵀ` and `grad_bias += Σ g`, then
/// writes `grad_col = Wᵀ · g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn columns_backward<T: Real>(
    g: &[T],
    weight: &[T],
    col: &[T],
    ck: usize,
    l: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_col: &mut [T],
) {
    let o = grad_bias.len();
    T::gemm(o, l, ck, g, false, col, true, grad_weight, true);
    for (row, gb) in g.chunks_exact(l).zip(grad_bias.iter_mut()) {
        *gb += row.iter().copied().sum::<T>();
    }
    T::gemm(ck, o, l, weight, true, g, false, grad_col, false);
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    let out_shape = check_params(x.shape(), weight, bias.len(), spec)?;
    let mut y = Tensor5::zeros(out_shape)?;
    let out = out_shape.spatial();
    let l = out_shape.voxels();
    let ck = spec.in_channels * spec.taps();
    let mut col = vec![T::zero(); ck * l];
    for n in 0..x.shape().n() {
        im2col(x.sample(n), x.shape().spatial(), spec, out, &mut col);
        apply_columns(weight.data(), bias, &col, ck, l, y.sample_mut(n));
    }
    Ok(y)
}

pub fn conv3d_backward<T: Real>(
    grad_out: &Tensor5<T>,
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let out_shape = check_params(x.shape(), weight, spec.out_channels, spec)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward",
            left: grad_out.shape(),
            right: out_shape,
        });
    }
    let out = out_shape.spatial();
    let l = out_shape.voxels();
    let ck = spec.in_channels * spec.taps();
    let mut grad_x = Tensor5::zeros(x.shape())?;
    let mut grad_weight = Tensor5::zeros(weight.shape())?;
    let mut grad_bias = vec![T::zero(); spec.out_channels];
    let mut col = vec![T::zero(); ck * l];
    let mut grad_col = vec![T::zero(); ck * l];
    for n in 0..x.shape().n() {
        im2col(x.sample(n), x.shape().spatial(), spec, out, &mut col);
        columns_backward(
            grad_out.sample(n),
            weight.data(),
            &col,
            ck,
            l,
            grad_weight.data_mut(),
            &mut grad_bias,
            &mut grad_col,
        );
        col2im(&grad_col, x.shape().spatial(), spec, out, grad_x.sample_mut(n));
    }
    Ok(ConvGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}
