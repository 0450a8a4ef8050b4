use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor5};

/// Intensity of the ellipsoid interior before noise.
const FOREGROUND: f64 = 0.8;
/// Width, in voxels, of the soft ellipsoid boundary.
const EDGE: f64 = 0.6;
const BUMP_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEffect {
    /// Class-1 semi-axes are multiplied by `(scale, √scale, 1)` along (d, h, w).
    pub scale: f64,
    /// Peak of the Gaussian intensity bump added to class-1 volumes.
    pub bump: f64,
}

impl Default for ClassEffect {
    fn default() -> Self {
        Self { scale: 1.3, bump: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub extent: [usize; 3],
    /// Class-0 ellipsoid semi-axes in voxels.
    pub base_shape: [f64; 3],
    pub class_effect: ClassEffect,
    pub noise_std: f64,
    /// Each sample's centre is shifted by a uniform draw from `[-jitter, jitter]` per axis.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            extent: [16, 16, 16],
            base_shape: [4.0, 4.0, 4.0],
            class_effect: ClassEffect::default(),
            noise_std: 0.1,
            jitter: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn class_axes(&self, label: u8) -> [f64; 3] {
        let [d, h, w] = self.base_shape;
        if label == 0 {
            [d, h, w]
        } else {
            let s = self.class_effect.scale;
            [d * s, h * s.sqrt(), w]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ce = &self.class_effect;
        if !(ce.scale > 0.0) || !ce.bump.is_finite() {
            return Err(Error::Config(format!("class_effect {ce:?} must have a positive scale")));
        }
        if !(self.noise_std >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("noise_std and jitter must be non-negative".into()));
        }
        if self.base_shape.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config(format!("semi-axes {:?} must be positive", self.base_shape)));
        }
        for label in [0, 1] {
            let axes = self.class_axes(label);
            for a in 0..3 {
                let half = (self.extent[a] as f64 - 1.0) / 2.0;
                if axes[a] + self.jitter > half {
                    return Err(Error::Config(format!(
                        "class {label} semi-axis {:.2} plus jitter {} exceeds half-extent {half} on axis {a}",
                        axes[a], self.jitter
                    )));
                }
            }
        }
        Ok(())
    }

    /// One sample of class `label`: soft ellipsoid, optional bump, translation and noise.
    fn render(&self, label: u8, rng: &mut Rng) -> Result<Tensor5<f32>> {
        let [dd, hh, ww] = self.extent;
        let axes = self.class_axes(label);
        let mut centre = self.extent.map(|e| (e as f64 - 1.0) / 2.0);
        if self.jitter > 0.0 {
            for c in &mut centre {
                *c += rng.uniform_range(-self.jitter, self.jitter);
            }
        }
        let bump_at = [centre[0] + axes[0] / 2.0, centre[1], centre[2]];
        let bump = if label == 1 { self.class_effect.bump } else { 0.0 };
        let mean_axis = axes.iter().sum::<f64>() / 3.0;
        let mut v = Tensor5::zeros(Shape::new(1, 1, dd, hh, ww))?;
        let data = v.data_mut();
        let mut i = 0;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let p = [d as f64, h as f64, w as f64];
                    let r = (0..3).map(|a| ((p[a] - centre[a]) / axes[a]).powi(2)).sum::<f64>().sqrt();
                    let inside = 1.0 / (1.0 + ((r - 1.0) * mean_axis / EDGE).exp());
                    let dist2 = (0..3).map(|a| (p[a] - bump_at[a]).powi(2)).sum::<f64>();
                    let b = bump * (-dist2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
                    let noise = if self.noise_std > 0.0 { self.noise_std * rng.normal() } else { 0.0 };
                    data[i] = (FOREGROUND * inside + b + noise).clamp(0.0, 1.0) as f32;
                    i += 1;
                }
            }
        }
        Ok(v)
    }
}

/// Labels alternate 0, 1, 0, … so any prefix is balanced. Sample `i` draws
/// from the stream `i` of `seed`, so generation order is irrelevant.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    (0..2 * spec.n_per_class)
        .into_par_iter()
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rng = root.split(i as u64);
            Ok(VolumeSample {
                volume: spec.render(label, &mut rng)?,
                label,
                subject_id: format!("synth-{i:05}"),
            })
        })
        .collect()
}
