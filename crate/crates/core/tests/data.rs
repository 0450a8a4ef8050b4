use dvox::data::{
    decode_volume, encode_volume, generate_dataset, read_dataset, write_dataset, AugmentSpec, SynthSpec, VolumeSample,
};
use dvox::data::augment_scale;
use dvox::eval::roc_auc;
use dvox::{Error, Rng, Shape, Tensor5};

fn sample(rng: &mut Rng) -> VolumeSample {
    VolumeSample {
        volume: Tensor5::uniform(Shape::new(1, 1, 3, 4, 5), rng, 0.0, 1.0).unwrap(),
        label: 1,
        subject_id: "subj-7".into(),
    }
}

#[test]
fn header_corruptions_are_format_errors() {
    let mut rng = Rng::new(99);
    let v = sample(&mut rng);
    let bytes = encode_volume(&v).unwrap();
    let header_len = bytes.len() - v.volume.len() * 4;
    for _ in 0..1000 {
        let mut bad = bytes.clone();
        let pos = (rng.next_u64() % header_len as u64) as usize;
        let flip = 1 + (rng.next_u64() % 255) as u8;
        bad[pos] ^= flip;
        match decode_volume(&bad) {
            Err(Error::Format(_)) => {}
            other => panic!("byte {pos} ^ {flip:#x}: {other:?}"),
        }
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&SynthSpec { n_per_class: 3, ..SynthSpec::default() }).unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(read_dataset(&manifest).unwrap(), ds);
}

#[test]
fn augmentation_keeps_label_and_range() {
    let ds = generate_dataset(&SynthSpec { n_per_class: 2, ..SynthSpec::default() }).unwrap();
    let spec = AugmentSpec { scale_range: [0.7, 1.4], enabled: true };
    let mut rng = Rng::new(1);
    for s in &ds {
        let a = augment_scale(s, &spec, &mut rng).unwrap();
        assert_eq!(a.label, s.label);
        assert_eq!(a.subject_id, s.subject_id);
        assert!(a.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Number of voxels brighter than `threshold`.
fn foreground_count(s: &VolumeSample, threshold: f32) -> f64 {
    s.volume.data().iter().filter(|&&v| v > threshold).count() as f64
}

#[test]
fn thresholded_volume_separates_default_classes() {
    let ds = generate_dataset(&SynthSpec::default()).unwrap();
    let labels: Vec<u8> = ds.iter().map(|s| s.label).collect();
    let mut best: f64 = 0.0;
    for step in 1..20 {
        let t = step as f32 * 0.05;
        let feature: Vec<f64> = ds.iter().map(|s| foreground_count(s, t)).collect();
        best = best.max(roc_auc(&feature, &labels).unwrap());
    }
    assert!(best > 0.95, "best threshold AUC {best}");
}
