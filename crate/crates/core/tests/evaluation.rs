use dvox::data::{generate_dataset, SynthSpec, VolumeSample};
use dvox::eval::{cross_validate, make_folds, mean_std, paired_test, roc_auc, CvPlan, Learner, PairedMethod};
use dvox::{Error, Result, Rng};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn random_instance(rng: &mut Rng) -> (Vec<f64>, Vec<u8>) {
    let n = 2 + (rng.next_u64() % 29) as usize;
    let levels = 1 + rng.next_u64() % 8;
    let scores: Vec<f64> = (0..n).map(|_| (rng.next_u64() % levels) as f64 * 0.125).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

#[test]
fn auc_equals_pair_counting() {
    let mut rng = Rng::new(31);
    for _ in 0..1000 {
        let (scores, labels) = random_instance(&mut rng);
        assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
    }
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transform(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (scores, labels) = random_instance(&mut Rng::new(seed));
        let base = roc_auc(&scores, &labels).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(roc_auc(&moved, &labels).unwrap(), base);
    }

    #[test]
    fn auc_complement_without_ties(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (_, labels) = random_instance(&mut rng);
        let scores: Vec<f64> = labels.iter().map(|_| rng.normal()).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn folds_partition_and_stratify(n0 in 3usize..60, n1 in 3usize..60, k in 2usize..4, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..n0).map(|_| 0).chain((0..n1).map(|_| 1)).collect();
        let plan = CvPlan { k, repeats: 2, stratified: true, seed };
        for folds in make_folds(&labels, &plan).unwrap() {
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for class in [0u8, 1] {
                let counts: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == class).count()).collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn paired_statistics_are_antisymmetric(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        for m in [PairedMethod::PairedT, PairedMethod::WilcoxonSignedRank] {
            let x = paired_test(&a, &b, m).unwrap();
            let y = paired_test(&b, &a, m).unwrap();
            prop_assert_eq!(x.statistic, -y.statistic);
            prop_assert_eq!(x.p_value, y.p_value);
            prop_assert!((0.0..=1.0).contains(&x.p_value));
        }
    }
}

#[test]
fn dataset_one_sizes_fold_counts() {
    let labels: Vec<u8> = (0..122).map(|_| 0).chain((0..50).map(|_| 1)).collect();
    let plan = CvPlan { k: 5, repeats: 3, stratified: true, seed: 0 };
    let partitions = make_folds(&labels, &plan).unwrap();
    for folds in &partitions {
        for f in folds {
            let controls = f.iter().filter(|&&i| labels[i] == 0).count();
            assert!((24..=25).contains(&controls));
            assert_eq!(f.len() - controls, 10);
            assert!((34..=35).contains(&f.len()));
        }
    }
    assert_ne!(partitions[0], partitions[1]);
    assert_ne!(partitions[1], partitions[2]);
    assert_ne!(partitions[0], partitions[2]);
}

#[test]
fn paired_t_matches_textbook_formula() {
    let a = [0.80, 0.82, 0.78, 0.85, 0.81];
    let b = [0.74, 0.75, 0.73, 0.79, 0.76];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let ss: f64 = d.iter().map(|v| v * v).sum::<f64>() - n * mean * mean;
    let t = mean * (n * (n - 1.0) / ss).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t.abs()));
    let r = paired_test(&a, &b, PairedMethod::PairedT).unwrap();
    assert!((r.statistic - t).abs() < 1e-10, "{} vs {t}", r.statistic);
    assert!((r.p_value - p).abs() < 1e-10, "{} vs {p}", r.p_value);
    assert_eq!(r.n_pairs, 5);
    assert!(matches!(paired_test(&a, &a, PairedMethod::PairedT), Err(Error::DegenerateTest(_))));
}

struct Constant;

impl Learner for Constant {
    fn fit_and_score(&self, _: &[VolumeSample], _: &[VolumeSample], test: &[VolumeSample], _: u64) -> Result<Vec<f64>> {
        Ok(vec![0.3; test.len()])
    }
}

struct Oracle;

impl Learner for Oracle {
    fn fit_and_score(&self, _: &[VolumeSample], _: &[VolumeSample], test: &[VolumeSample], _: u64) -> Result<Vec<f64>> {
        Ok(test.iter().map(|s| f64::from(s.label)).collect())
    }
}

/// Fails on one specific held-out fold.
struct Faulty;

impl Learner for Faulty {
    fn fit_and_score(&self, train: &[VolumeSample], _: &[VolumeSample], test: &[VolumeSample], _: u64) -> Result<Vec<f64>> {
        if test.iter().any(|s| s.subject_id == "synth-00000") && !train.is_empty() {
            return Err(Error::Data("boom".into()));
        }
        Ok(vec![0.0; test.len()])
    }
}

fn small_dataset() -> Vec<VolumeSample> {
    generate_dataset(&SynthSpec { n_per_class: 9, ..SynthSpec::default() }).unwrap()
}

#[test]
fn constant_and_oracle_learners() {
    let data = small_dataset();
    let plan = CvPlan::default();
    let c = cross_validate(&Constant, &data, &plan, "const", 1).unwrap();
    assert!(c.flat().iter().all(|&a| a == 0.5));
    let o = cross_validate(&Oracle, &data, &plan, "oracle", 2).unwrap();
    assert_eq!(o.flat().len(), 9);
    assert!(o.flat().iter().all(|&a| a == 1.0));
    assert_eq!((o.mean, o.std), (1.0, 0.0));
    let (m, s) = mean_std(&c.flat());
    assert!((m - c.mean).abs() < 1e-12 && (s - c.std).abs() < 1e-12);
}

#[test]
fn fold_errors_carry_their_position() {
    let data = small_dataset();
    let err = cross_validate(&Faulty, &data, &CvPlan::default(), "faulty", 1).unwrap_err();
    assert!(matches!(err, Error::Fold { repeat: 0, .. }), "{err}");
}

#[test]
fn report_independent_of_thread_count() {
    struct Noisy;
    impl Learner for Noisy {
        fn fit_and_score(&self, _: &[VolumeSample], _: &[VolumeSample], test: &[VolumeSample], seed: u64) -> Result<Vec<f64>> {
            let mut rng = Rng::new(seed);
            Ok(test.iter().map(|s| f64::from(s.label) + rng.normal()).collect())
        }
    }
    let data = small_dataset();
    let a = cross_validate(&Noisy, &data, &CvPlan::default(), "n", 1).unwrap();
    let b = cross_validate(&Noisy, &data, &CvPlan::default(), "n", 3).unwrap();
    assert_eq!(a, b);
}
