use super::config::ModelConfig;
use super::layers::{ConvUnit, Head, VoxResBlock};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Mode};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor5};

#[derive(Clone, Debug)]
pub enum Stage<T> {
    Conv(ConvUnit<T>),
    VoxRes(VoxResBlock<T>),
}

impl<T: Real> Stage<T> {
    fn infer(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        match self {
            Stage::Conv(u) => u.infer(x),
            Stage::VoxRes(b) => b.infer(x),
        }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        match self {
            Stage::Conv(u) => u.forward(x, mode),
            Stage::VoxRes(b) => b.forward(x, mode),
        }
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        match self {
            Stage::Conv(u) => u.backward(g),
            Stage::VoxRes(b) => b.backward(g),
        }
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Stage::Conv(u) => u.params(),
            Stage::VoxRes(b) => b.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Stage::Conv(u) => u.params_mut(),
            Stage::VoxRes(b) => b.params_mut(),
        }
    }

    fn spec(&self) -> &ConvSpec {
        match self {
            Stage::Conv(u) => u.conv.spec(),
            Stage::VoxRes(b) => b.first.conv.spec(),
        }
    }

    /// Number of deformable convolutions (offset predictors) in this stage.
    pub fn deformable_convs(&self) -> usize {
        match self {
            Stage::Conv(u) => usize::from(u.conv.is_deformable()),
            Stage::VoxRes(b) => 2 * usize::from(b.is_deformable()),
        }
    }
}

enum Kind {
    Conv { idx: usize, stride: usize },
    VoxRes { idx: usize },
}

const TOPOLOGY: [Kind; 10] = [
    Kind::Conv { idx: 1, stride: 1 },
    Kind::Conv { idx: 2, stride: 1 },
    Kind::Conv { idx: 3, stride: 2 },
    Kind::VoxRes { idx: 1 },
    Kind::VoxRes { idx: 2 },
    Kind::Conv { idx: 4, stride: 2 },
    Kind::VoxRes { idx: 3 },
    Kind::Conv { idx: 5, stride: 2 },
    Kind::VoxRes { idx: 4 },
    Kind::Conv { idx: 6, stride: 2 },
];

/// The dVoxResNet classifier: ten stages, global average pooling and a
/// linear head producing one logit per batch element.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    stages: Vec<Stage<T>>,
    head: Head<T>,
}

fn in_stage(stage: &str, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("{stage}: {msg}")),
        Error::ShapeMismatch { op, left, right } => {
            Error::Shape(format!("{stage}: shape mismatch in {op}: {left} vs {right}"))
        }
        other => other,
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        let k = config.kernel;
        let mut names = Vec::with_capacity(TOPOLOGY.len());
        let mut stages = Vec::with_capacity(TOPOLOGY.len());
        let mut channels = config.in_channels;
        for kind in &TOPOLOGY {
            match *kind {
                Kind::Conv { idx, stride } => {
                    let name = format!("conv{idx}");
                    let out = config.widths[idx - 1];
                    let spec = ConvSpec::new(channels, out, k).with_stride(stride);
                    let deform = config.deform_conv_idx.contains(&idx);
                    stages.push(Stage::Conv(ConvUnit::new(&name, spec, deform, true, &rng)?));
                    names.push(name);
                    channels = out;
                }
                Kind::VoxRes { idx } => {
                    let name = format!("voxres{idx}");
                    let deform = config.deform_voxres_idx.contains(&idx);
                    stages.push(Stage::VoxRes(VoxResBlock::new(&name, channels, k, deform, &rng)?));
                    names.push(name);
                }
            }
        }
        let head = Head::new(channels, config.head_hidden, &rng)?;
        Ok(Self {
            config,
            names,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> impl Iterator<Item = (&str, &Stage<T>)> {
        self.names.iter().map(String::as_str).zip(&self.stages)
    }

    /// Spatial extents after each stage for a given input extent.
    pub fn stage_extents(&self, input: [usize; 3]) -> Result<Vec<(String, [usize; 3])>> {
        let mut ext = input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (name, stage) in self.names.iter().zip(&self.stages) {
            ext = stage.spec().output_extent(ext).map_err(|e| in_stage(name, e))?;
            if ext.contains(&0) {
                return Err(Error::Shape(format!("{name}: input {input:?} too small, extent collapses to {ext:?}")));
            }
            out.push((name.clone(), ext));
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        let s = x.shape();
        if s.c() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input {s} has {} channels, model expects {}",
                s.c(),
                self.config.in_channels
            )));
        }
        if s.n() == 0 {
            return Err(Error::Shape(format!("empty batch {s}")));
        }
        self.stage_extents(s.spatial()).map(|_| ())
    }

    /// Eval-mode logits; reads running statistics and keeps no state.
    pub fn predict(&self, x: &Tensor5<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (name, stage) in self.names.iter().zip(&self.stages) {
            h = stage.infer(&h).map_err(|e| in_stage(name, e))?;
        }
        self.head.infer(&h)
    }

    /// Logits with activations cached for [`Model::backward`]. Train mode
    /// normalizes by batch statistics and updates the running ones.
    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (name, stage) in self.names.iter().zip(&mut self.stages) {
            h = stage.forward(&h, mode).map_err(|e| in_stage(name, e))?;
        }
        self.head.forward(&h)
    }

    /// Accumulates parameter gradients for `d loss / d logits` and returns
    /// the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_logits: &[T]) -> Result<Tensor5<T>> {
        let mut g = self.head.backward(grad_logits)?;
        for (name, stage) in self.names.iter().zip(&mut self.stages).rev() {
            g = stage.backward(&g).map_err(|e| in_stage(name, e))?;
        }
        Ok(g)
    }

    /// All tensors in a fixed order, including non-trainable running statistics.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.stages.iter().flat_map(Stage::params).collect();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.stages.iter_mut().flat_map(Stage::params_mut).collect();
        v.extend(self.head.params_mut());
        v
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    /// Count of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn num_offset_predictors(&self) -> usize {
        self.stages.iter().map(Stage::deformable_convs).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.value.clear_grad();
        }
    }
}
