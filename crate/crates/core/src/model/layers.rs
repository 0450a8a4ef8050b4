//! Conv3D units, VoxRes blocks and the classification head.
//!
//! Each layer owns its parameters and, after a caching forward pass, the
//! values its backward pass needs. Backward accumulates into the gradient
//! slots of the parameters and returns the gradient w.r.t. the layer input.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormSaved, ConvSpec, DeformableConvSpec, Mode, RunningStats};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor5};

fn missing_cache(layer: &str) -> Error {
    Error::Argument(format!("{layer}: backward called without a preceding forward pass"))
}

fn he_normal<T: Real>(name: &str, shape: Shape, fan_in: usize, rng: &Rng) -> Result<Parameter<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let value = Tensor5::randn(shape, &mut rng.split_by_name(name), 0.0, std)?;
    Parameter::new(name, value, true)
}

fn zeros<T: Real>(name: &str, shape: Shape, trainable: bool) -> Result<Parameter<T>> {
    Parameter::new(name, Tensor5::zeros(shape)?, trainable)
}

fn accumulate<T: Real>(p: &mut Parameter<T>, g: &[T]) {
    p.value
        .grad_mut()
        .iter_mut()
        .zip(g)
        .for_each(|(a, &b)| *a += b);
}

fn vector_shape(len: usize) -> Shape {
    Shape::new(len, 1, 1, 1, 1)
}

#[derive(Clone, Debug)]
struct OffsetPredictor<T> {
    weight: Parameter<T>,
    bias: Parameter<T>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    x: Tensor5<T>,
    offsets: Option<Tensor5<T>>,
}

/// A regular or deformable convolution.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    spec: ConvSpec,
    weight: Parameter<T>,
    bias: Parameter<T>,
    offset: Option<OffsetPredictor<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> ConvLayer<T> {
    /// Main weights are He-normal, biases zero; an offset predictor starts at
    /// zero so a fresh deformable layer computes the regular convolution.
    pub fn new(prefix: &str, spec: ConvSpec, deformable: bool, rng: &Rng) -> Result<Self> {
        let fan_in = spec.in_channels * spec.taps();
        let offset = if deformable {
            let pred = DeformableConvSpec::new(spec).offset_predictor();
            Some(OffsetPredictor {
                weight: zeros(&format!("{prefix}.offset.weight"), pred.weight_shape(), true)?,
                bias: zeros(&format!("{prefix}.offset.bias"), vector_shape(pred.out_channels), true)?,
            })
        } else {
            None
        };
        Ok(Self {
            spec,
            weight: he_normal(&format!("{prefix}.weight"), spec.weight_shape(), fan_in, rng)?,
            bias: zeros(&format!("{prefix}.bias"), vector_shape(spec.out_channels), true)?,
            offset,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn is_deformable(&self) -> bool {
        self.offset.is_some()
    }

    pub fn infer(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        match &self.offset {
            None => ops::conv3d_forward(x, &self.weight.value, self.bias.value.data(), &self.spec),
            Some(off) => ops::deformable_conv3d_forward(
                x,
                &self.weight.value,
                self.bias.value.data(),
                &off.weight.value,
                off.bias.value.data(),
                &DeformableConvSpec::new(self.spec),
            )
            .map(|(y, _)| y),
        }
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let (y, offsets) = match &self.offset {
            None => (
                ops::conv3d_forward(x, &self.weight.value, self.bias.value.data(), &self.spec)?,
                None,
            ),
            Some(off) => {
                let (y, o) = ops::deformable_conv3d_forward(
                    x,
                    &self.weight.value,
                    self.bias.value.data(),
                    &off.weight.value,
                    off.bias.value.data(),
                    &DeformableConvSpec::new(self.spec),
                )?;
                (y, Some(o))
            }
        };
        self.cache = Some(ConvCache {
            x: x.clone(),
            offsets,
        });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor5<T>) -> Result<Tensor5<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.weight.name))?;
        match (&mut self.offset, cache.offsets) {
            (None, _) => {
                let g = ops::conv3d_backward(grad, &cache.x, &self.weight.value, &self.spec)?;
                accumulate(&mut self.weight, g.grad_weight.data());
                accumulate(&mut self.bias, &g.grad_bias);
                Ok(g.grad_x)
            }
            (Some(off), Some(offsets)) => {
                let g = ops::deformable_conv3d_backward(
                    grad,
                    &cache.x,
                    &self.weight.value,
                    &off.weight.value,
                    &offsets,
                    &DeformableConvSpec::new(self.spec),
                )?;
                accumulate(&mut self.weight, g.grad_weight.data());
                accumulate(&mut self.bias, &g.grad_bias);
                accumulate(&mut off.weight, g.grad_offset_weight.data());
                accumulate(&mut off.bias, &g.grad_offset_bias);
                Ok(g.grad_x)
            }
            (Some(_), None) => Err(missing_cache(&self.weight.name)),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some(off) = &self.offset {
            v.push(&off.weight);
            v.push(&off.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(off) = &mut self.offset {
            v.push(&mut off.weight);
            v.push(&mut off.bias);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    gamma: Parameter<T>,
    beta: Parameter<T>,
    running_mean: Parameter<T>,
    running_var: Parameter<T>,
    saved: Option<BatchNormSaved<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        let s = vector_shape(channels);
        Ok(Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor5::full(s, T::one())?, true)?,
            beta: zeros(&format!("{prefix}.beta"), s, true)?,
            running_mean: zeros(&format!("{prefix}.running_mean"), s, false)?,
            running_var: Parameter::new(format!("{prefix}.running_var"), Tensor5::full(s, T::one())?, false)?,
            saved: None,
        })
    }

    fn stats(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.running_mean.value.data().to_vec(),
            var: self.running_var.value.data().to_vec(),
        }
    }

    pub fn infer(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        ops::batchnorm_eval(x, self.gamma.value.data(), self.beta.value.data(), &self.stats()).map(|(y, _)| y)
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let mut stats = self.stats();
        let (y, saved) = ops::batchnorm_forward(x, self.gamma.value.data(), self.beta.value.data(), &mut stats, mode)?;
        self.running_mean.value.data_mut().copy_from_slice(&stats.mean);
        self.running_var.value.data_mut().copy_from_slice(&stats.var);
        self.saved = Some(saved);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor5<T>) -> Result<Tensor5<T>> {
        let saved = self.saved.take().ok_or_else(|| missing_cache(&self.gamma.name))?;
        let (gx, gg, gb) = ops::batchnorm_backward(grad, &saved, self.gamma.value.data())?;
        accumulate(&mut self.gamma, &gg);
        accumulate(&mut self.beta, &gb);
        Ok(gx)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

/// conv → batchnorm → (relu).
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm<T>,
    relu: bool,
    pre_activation: Option<Tensor5<T>>,
}

impl<T: Real> ConvUnit<T> {
    pub fn new(prefix: &str, spec: ConvSpec, deformable: bool, relu: bool, rng: &Rng) -> Result<Self> {
        Ok(Self {
            conv: ConvLayer::new(prefix, spec, deformable, rng)?,
            bn: BatchNorm::new(&format!("{prefix}.bn"), spec.out_channels)?,
            relu,
            pre_activation: None,
        })
    }

    pub fn infer(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = self.bn.infer(&self.conv.infer(x)?)?;
        Ok(if self.relu { ops::relu(&y) } else { y })
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        if self.relu {
            let out = ops::relu(&y);
            self.pre_activation = Some(y);
            Ok(out)
        } else {
            Ok(y)
        }
    }

    pub fn backward(&mut self, grad: &Tensor5<T>) -> Result<Tensor5<T>> {
        let g = if self.relu {
            let pre = self.pre_activation.take().ok_or_else(|| missing_cache("conv unit"))?;
            ops::relu_backward(grad, &pre)?
        } else {
            grad.clone()
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
}

/// Two equal-width conv units with an identity skip added before the final
/// activation. Shape-preserving.
#[derive(Clone, Debug)]
pub struct VoxResBlock<T> {
    pub first: ConvUnit<T>,
    pub second: ConvUnit<T>,
    sum: Option<Tensor5<T>>,
}

impl<T: Real> VoxResBlock<T> {
    pub fn new(prefix: &str, channels: usize, kernel: [usize; 3], deformable: bool, rng: &Rng) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, kernel);
        Ok(Self {
            first: ConvUnit::new(&format!("{prefix}.conv1"), spec, deformable, true, rng)?,
            second: ConvUnit::new(&format!("{prefix}.conv2"), spec, deformable, false, rng)?,
            sum: None,
        })
    }

    pub fn infer(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let h = self.second.infer(&self.first.infer(x)?)?;
        Ok(ops::relu(&h.add(x)?))
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let h = self.first.forward(x, mode)?;
        let s = self.second.forward(&h, mode)?.add(x)?;
        let out = ops::relu(&s);
        self.sum = Some(s);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor5<T>) -> Result<Tensor5<T>> {
        let s = self.sum.take().ok_or_else(|| missing_cache("voxres block"))?;
        let gs = ops::relu_backward(grad, &s)?;
        let gh = self.second.backward(&gs)?;
        let mut gx = self.first.backward(&gh)?;
        gx.add_assign(&gs)?;
        Ok(gx)
    }

    pub fn is_deformable(&self) -> bool {
        self.first.conv.is_deformable()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }
}

#[derive(Clone, Debug)]
struct Dense<T> {
    weight: Parameter<T>,
    bias: Parameter<T>,
}

impl<T: Real> Dense<T> {
    fn new(prefix: &str, inputs: usize, outputs: usize, gain: f64, rng: &Rng) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let std = (gain / inputs as f64).sqrt();
        let w = Tensor5::randn(Shape::new(outputs, inputs, 1, 1, 1), &mut rng.split_by_name(&name), 0.0, std)?;
        Ok(Self {
            weight: Parameter::new(name, w, true)?,
            bias: zeros(&format!("{prefix}.bias"), vector_shape(outputs), true)?,
        })
    }

    fn apply(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        ops::linear(x, &self.weight.value, self.bias.value.data())
    }

    fn backward(&mut self, grad: &Tensor5<T>, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let (gx, gw, gb) = ops::linear_backward(grad, x, &self.weight.value)?;
        accumulate(&mut self.weight, gw.data());
        accumulate(&mut self.bias, &gb);
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
struct HeadCache<T> {
    pooled: Tensor5<T>,
    input_shape: Shape,
    hidden_pre: Option<Tensor5<T>>,
}

/// Global average pool → [linear → relu] → linear → one logit.
#[derive(Clone, Debug)]
pub struct Head<T> {
    hidden: Option<Dense<T>>,
    out: Dense<T>,
    cache: Option<HeadCache<T>>,
}

impl<T: Real> Head<T> {
    pub fn new(channels: usize, hidden: usize, rng: &Rng) -> Result<Self> {
        let (hidden, out_in) = if hidden > 0 {
            (Some(Dense::new("head.hidden", channels, hidden, 2.0, rng)?), hidden)
        } else {
            (None, channels)
        };
        Ok(Self {
            hidden,
            out: Dense::new("head", out_in, 1, 1.0, rng)?,
            cache: None,
        })
    }

    fn run(&self, x: &Tensor5<T>) -> Result<(Tensor5<T>, Option<Tensor5<T>>, Tensor5<T>)> {
        let pooled = ops::global_avg_pool(x)?;
        let (hidden_pre, feats) = match &self.hidden {
            Some(h) => {
                let pre = h.apply(&pooled)?;
                let act = ops::relu(&pre);
                (Some(pre), act)
            }
            None => (None, pooled.clone()),
        };
        let logits = self.out.apply(&feats)?;
        Ok((pooled, hidden_pre, logits))
    }

    pub fn infer(&self, x: &Tensor5<T>) -> Result<Vec<T>> {
        Ok(self.run(x)?.2.into_data())
    }

    pub fn forward(&mut self, x: &Tensor5<T>) -> Result<Vec<T>> {
        let (pooled, hidden_pre, logits) = self.run(x)?;
        self.cache = Some(HeadCache {
            pooled,
            input_shape: x.shape(),
            hidden_pre,
        });
        Ok(logits.into_data())
    }

    pub fn backward(&mut self, grad_logits: &[T]) -> Result<Tensor5<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("head"))?;
        let n = cache.input_shape.n();
        let g = Tensor5::from_vec(Shape::new(n, 1, 1, 1, 1), grad_logits.to_vec())?;
        let g_pooled = match (&mut self.hidden, &cache.hidden_pre) {
            (Some(h), Some(pre)) => {
                let feats = ops::relu(pre);
                let g_feats = self.out.backward(&g, &feats)?;
                let g_pre = ops::relu_backward(&g_feats, pre)?;
                h.backward(&g_pre, &cache.pooled)?
            }
            _ => self.out.backward(&g, &cache.pooled)?,
        };
        ops::global_avg_pool_backward(&g_pooled, cache.input_shape)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = Vec::new();
        if let Some(h) = &self.hidden {
            v.push(&h.weight);
            v.push(&h.bias);
        }
        v.push(&self.out.weight);
        v.push(&self.out.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = Vec::new();
        if let Some(h) = &mut self.hidden {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }
}
