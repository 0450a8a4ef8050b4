use serde::{Deserialize, Serialize};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::ops::trilinear::Cell;
use crate::rng::Rng;
use crate::tensor::Tensor5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Interval each axis' scale factor is drawn from.
    pub scale_range: [f64; 2],
    pub enabled: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            scale_range: [0.9, 1.1],
            enabled: true,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(Error::Config(format!(
                "scale_range [{lo}, {hi}] must be positive with min <= max"
            )));
        }
        Ok(())
    }
}

/// Resamples `volume` so that output voxel `p` reads the input at
/// `c + (p − c)·s` per axis, with `c` the volume centre `extent / 2`.
/// Reads outside the input are zero.
pub fn rescale(volume: &Tensor5<f32>, scale: [f64; 3]) -> Result<Tensor5<f32>> {
    let shape = volume.shape();
    let dims = shape.spatial();
    let centre = dims.map(|e| e as f64 / 2.0);
    let vox = shape.voxels();
    let mut out = Tensor5::zeros(shape)?;
    let src = volume.data();
    let dst = out.data_mut();
    for ch in 0..shape.n() * shape.c() {
        let input = &src[ch * vox..(ch + 1) * vox];
        let mut i = ch * vox;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let p = [d, h, w];
                    let q = [0, 1, 2].map(|a| (centre[a] + (p[a] as f64 - centre[a]) * scale[a]) as f32);
                    dst[i] = Cell::new(q, dims).sample(input);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Random per-axis rescaling; a disabled spec returns the sample unchanged.
pub fn augment_scale(v: &VolumeSample, spec: &AugmentSpec, rng: &mut Rng) -> Result<VolumeSample> {
    if !spec.enabled {
        return Ok(v.clone());
    }
    spec.validate()?;
    let [lo, hi] = spec.scale_range;
    let scale = [(); 3].map(|_| rng.uniform_range(lo, hi));
    Ok(VolumeSample {
        volume: rescale(&v.volume, scale)?,
        label: v.label,
        subject_id: v.subject_id.clone(),
    })
}
