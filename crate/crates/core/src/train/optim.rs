use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OptimizerState;
use crate::param::Parameter;
use crate::tensor::{Real, Shape, Tensor5};

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd { .. } => "sgd",
            OptimizerConfig::Adam { .. } => "adam",
        }
    }

    /// A zero learning rate is accepted and makes every step a no-op.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok && self.lr().is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter optimizer buffers, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every trainable
    /// parameter, reading gradients from their gradient slots (absent slots
    /// count as zero). Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(g) = p.value.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        param: p.name.clone(),
                        reason: format!("gradient element {i} is {}", g[i]),
                    });
                }
            }
        }
        self.step += 1;
        let lr = T::cast(lr);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            let decay = if p.decays() { self.weight_decay() } else { T::zero() };
            let grad: Vec<T> = match p.value.grad() {
                Some(g) => g.iter().zip(p.value.data()).map(|(&g, &w)| g + decay * w).collect(),
                None => p.value.data().iter().map(|&w| decay * w).collect(),
            };
            match self.config {
                OptimizerConfig::Sgd { momentum, .. } => {
                    let momentum = T::cast(momentum);
                    let buf = self.first.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    for ((w, b), g) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                        *b = momentum * *b + *g;
                        *w -= lr * *b;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    let t = self.step as i32;
                    let c1 = T::cast(1.0 - beta1.powi(t));
                    let c2 = T::cast(1.0 - beta2.powi(t));
                    let (b1, b2, eps) = (T::cast(beta1), T::cast(beta2), T::cast(eps));
                    let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    let v = self.second.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); n]);
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn weight_decay(&self) -> T {
        match self.config {
            OptimizerConfig::Sgd { weight_decay, .. } | OptimizerConfig::Adam { weight_decay, .. } => {
                T::cast(weight_decay)
            }
        }
    }

    /// Buffers as named tensors (`<kind>.m.<param>`, `<kind>.v.<param>`) for checkpoints.
    pub fn state(&self) -> Result<OptimizerState<T>> {
        let kind = self.config.kind();
        let mut slots = Vec::new();
        for (tag, map) in [("m", &self.first), ("v", &self.second)] {
            for (name, buf) in map {
                let t = Tensor5::from_vec(Shape::new(buf.len(), 1, 1, 1, 1), buf.clone())?;
                slots.push(Parameter::new(format!("{kind}.{tag}.{name}"), t, false)?);
            }
        }
        Ok(OptimizerState {
            kind: kind.to_string(),
            step: self.step,
            slots,
        })
    }

    pub fn restore(config: OptimizerConfig, state: &OptimizerState<T>) -> Result<Self> {
        let mut opt = Self::new(config)?;
        if state.kind != opt.config.kind() {
            return Err(Error::Format(format!(
                "optimizer state is for `{}`, config asks for `{}`",
                state.kind,
                opt.config.kind()
            )));
        }
        opt.step = state.step;
        for slot in &state.slots {
            let rest = slot.name.strip_prefix(opt.config.kind()).and_then(|r| r.strip_prefix('.'));
            let (tag, name) = rest
                .and_then(|r| r.split_once('.'))
                .ok_or_else(|| Error::Format(format!("bad optimizer slot name `{}`", slot.name)))?;
            let map = match tag {
                "m" => &mut opt.first,
                "v" => &mut opt.second,
                _ => return Err(Error::Format(format!("bad optimizer slot name `{}`", slot.name))),
            };
            map.insert(name.to_string(), slot.value.data().to_vec());
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    StepDecay { factor: f64, every: usize },
}


impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::StepDecay { factor, every } if !(factor > 0.0) || every == 0 => Err(Error::Config(
                format!("step decay needs factor > 0 and every >= 1, got {factor} and {every}"),
            )),
            _ => Ok(()),
        }
    }

    /// Rate for zero-based `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => base * factor.powi((epoch / every) as i32),
        }
    }
}
