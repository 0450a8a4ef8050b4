//! Synthetic volumes, scaling augmentation and on-disk datasets.

mod augment;
mod manifest;
mod synth;
mod volume_io;

pub use augment::{augment_scale, rescale, AugmentSpec};
pub use manifest::{parse_manifest, read_dataset, write_dataset, ManifestEntry, MANIFEST_NAME};
pub use synth::{generate_dataset, ClassEffect, SynthSpec};
pub use volume_io::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor5};

/// One labelled volume of shape `(1, 1, D, H, W)` with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub volume: Tensor5<f32>,
    pub label: u8,
    pub subject_id: String,
}

/// Stacks the selected samples into an `(N, 1, D, H, W)` batch and its labels.
pub fn stack<T: Real>(samples: &[&VolumeSample]) -> Result<(Tensor5<T>, Vec<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?
        .volume
        .shape();
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.volume.shape() != first {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first,
                right: s.volume.shape(),
            });
        }
        data.extend(s.volume.data().iter().map(|&v| T::cast(f64::from(v))));
        labels.push(T::cast(f64::from(s.label)));
    }
    let [d, h, w] = first.spatial();
    let x = Tensor5::from_vec(Shape::new(samples.len(), first.c(), d, h, w), data)?;
    Ok((x, labels))
}

/// Class counts `(negatives, positives)`.
pub fn class_counts(samples: &[VolumeSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    (samples.len() - pos, pos)
}
