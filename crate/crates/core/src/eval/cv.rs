use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auc::roc_auc;
use super::folds::{make_folds, CvPlan};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of each training pool held out for model selection.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Anything that can be fitted on a training pool and then score held-out samples.
pub trait Learner: Sync {
    /// Returns one score per `test` sample; higher means more likely class 1.
    fn fit_and_score(
        &self,
        train: &[VolumeSample],
        val: &[VolumeSample],
        test: &[VolumeSample],
        seed: u64,
    ) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub label: String,
    /// `scores[repeat][fold]` is the held-out AUC.
    pub scores: Vec<Vec<f64>>,
    pub mean: f64,
    /// Sample standard deviation over all folds (0 for a single score).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl CvReport {
    pub fn new(label: impl Into<String>, scores: Vec<Vec<f64>>) -> Self {
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&flat);
        Self {
            label: label.into(),
            scores,
            mean,
            std,
        }
    }

    /// Scores ordered by (repeat, fold), the pairing used by paired tests.
    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    /// One row per (repeat, fold) plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,repeat,fold,auc,mean,std\n");
        for (r, row) in self.scores.iter().enumerate() {
            for (f, auc) in row.iter().enumerate() {
                writeln!(s, "\"{}\",{r},{f},{auc:.17},,", self.label).unwrap();
            }
        }
        writeln!(s, "\"{}\",all,all,,{:.17},{:.17}", self.label, self.mean, self.std).unwrap();
        s
    }
}

/// Stratified split of `indices` into (train, validation), holding out
/// `round(fraction · count)` of each class, at least one when a class has two
/// or more members.
pub fn stratified_holdout(samples: &[VolumeSample], indices: &[usize], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| samples[i].label == class).collect();
        rng.shuffle(&mut members);
        let mut n_val = (fraction * members.len() as f64).round() as usize;
        if members.len() >= 2 {
            n_val = n_val.clamp(1, members.len() - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn gather(samples: &[VolumeSample], idx: &[usize]) -> Vec<VolumeSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Repeated k-fold cross-validation. Fold jobs run on a pool of `threads`
/// workers; the report is assembled in (repeat, fold) order, so the result
/// does not depend on the thread count.
pub fn cross_validate(
    learner: &dyn Learner,
    dataset: &[VolumeSample],
    plan: &CvPlan,
    label: &str,
    threads: usize,
) -> Result<CvReport> {
    let labels: Vec<u8> = dataset.iter().map(|s| s.label).collect();
    let folds = make_folds(&labels, plan)?;
    let jobs: Vec<(usize, usize)> = (0..plan.repeats).flat_map(|r| (0..plan.k).map(move |f| (r, f))).collect();
    let root = Rng::new(plan.seed).split_by_name("cv");
    let run = |&(r, f): &(usize, usize)| -> Result<f64> {
        let wrap = |e: Error| Error::Fold {
            repeat: r,
            fold: f,
            source: Box::new(e),
        };
        let job = root.split((r * plan.k + f) as u64);
        let test_idx = &folds[r][f];
        let pool: Vec<usize> = (0..plan.k).filter(|&g| g != f).flat_map(|g| folds[r][g].iter().copied()).collect();
        let (train_idx, val_idx) =
            stratified_holdout(dataset, &pool, VALIDATION_FRACTION, &mut job.split_by_name("holdout"));
        let test = gather(dataset, test_idx);
        let scores = learner
            .fit_and_score(
                &gather(dataset, &train_idx),
                &gather(dataset, &val_idx),
                &test,
                job.split_by_name("fit").next_u64(),
            )
            .map_err(wrap)?;
        let test_labels: Vec<u8> = test.iter().map(|s| s.label).collect();
        roc_auc(&scores, &test_labels).map_err(wrap)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let aucs: Vec<f64> = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let scores = aucs.chunks(plan.k).map(<[f64]>::to_vec).collect();
    Ok(CvReport::new(label, scores))
}
