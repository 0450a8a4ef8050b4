//! Per-channel batch normalization over (N, D, H, W).

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor5};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    x_hat: Tensor5<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

fn check_channels<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T], stats_len: usize) -> Result<()> {
    let c = x.shape().c();
    if gamma.len() != c || beta.len() != c || stats_len != c {
        return Err(Error::Shape(format!(
            "batchnorm over {} needs {c} channel parameters, got gamma {}, beta {}, stats {stats_len}",
            x.shape(),
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Train mode normalizes by batch statistics (biased variance) and updates
/// `stats` with momentum 0.1 (unbiased variance); eval mode reads `stats`.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor5<T>, BatchNormSaved<T>)> {
    match mode {
        Mode::Eval => batchnorm_eval(x, gamma, beta, stats),
        Mode::Train => {
            check_channels(x, gamma, beta, stats.mean.len())?;
            let shape = x.shape();
            let (n, c, vox) = (shape.n(), shape.c(), shape.voxels());
            let count = n * vox;
            if count == 0 {
                return Err(Error::Shape(format!("batchnorm over empty batch {shape}")));
            }
            let m = T::cast(count as f64);
            let momentum = T::cast(BN_MOMENTUM);
            let mut inv_std = vec![T::zero(); c];
            let mut x_hat = Tensor5::zeros(shape)?;
            let mut y = Tensor5::zeros(shape)?;
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    sum += x.channel(b, ch).iter().copied().sum::<T>();
                }
                let mean = sum / m;
                let mut sq = T::zero();
                for b in 0..n {
                    sq += x.channel(b, ch).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / m;
                let istd = T::one() / (var + T::cast(BN_EPS)).sqrt();
                inv_std[ch] = istd;
                for b in 0..n {
                    let start = (b * c + ch) * vox;
                    for i in start..start + vox {
                        let xh = (x.data()[i] - mean) * istd;
                        x_hat.data_mut()[i] = xh;
                        y.data_mut()[i] = gamma[ch] * xh + beta[ch];
                    }
                }
                let unbiased = if count > 1 { sq / T::cast((count - 1) as f64) } else { var };
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
            }
            Ok((
                y,
                BatchNormSaved {
                    x_hat,
                    inv_std,
                    mode,
                },
            ))
        }
    }
}

/// Eval-mode normalization; reads running statistics only.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
) -> Result<(Tensor5<T>, BatchNormSaved<T>)> {
    check_channels(x, gamma, beta, stats.mean.len())?;
    let shape = x.shape();
    let (n, c, vox) = (shape.n(), shape.c(), shape.voxels());
    let inv_std: Vec<T> = stats
        .var
        .iter()
        .map(|&v| T::one() / (v + T::cast(BN_EPS)).sqrt())
        .collect();
    let mut x_hat = Tensor5::zeros(shape)?;
    let mut y = Tensor5::zeros(shape)?;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * vox;
            for i in start..start + vox {
                let xh = (x.data()[i] - stats.mean[ch]) * inv_std[ch];
                x_hat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            x_hat,
            inv_std,
            mode: Mode::Eval,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor5<T>,
    saved: &BatchNormSaved<T>,
    gamma: &[T],
) -> Result<(Tensor5<T>, Vec<T>, Vec<T>)> {
    let shape = saved.x_hat.shape();
    if grad_out.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            left: grad_out.shape(),
            right: shape,
        });
    }
    let (n, c, vox) = (shape.n(), shape.c(), shape.voxels());
    if gamma.len() != c {
        return Err(Error::Shape(format!("gamma has {} entries, expected {c}", gamma.len())));
    }
    let m = T::cast((n * vox) as f64);
    let mut grad_x = Tensor5::zeros(shape)?;
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let g = grad_out.data();
    let xh = saved.x_hat.data();
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let start = (b * c + ch) * vox;
            for i in start..start + vox {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        grad_beta[ch] = sum_g;
        grad_gamma[ch] = sum_gx;
        let scale = gamma[ch] * saved.inv_std[ch];
        for b in 0..n {
            let start = (b * c + ch) * vox;
            for i in start..start + vox {
                grad_x.data_mut()[i] = match saved.mode {
                    Mode::Eval => scale * g[i],
                    Mode::Train => scale * (g[i] - sum_g / m - xh[i] * sum_gx / m),
                };
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
