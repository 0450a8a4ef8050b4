//! ROC/AUC, repeated stratified cross-validation and paired significance tests.

mod auc;
mod cv;
mod folds;
mod stats;
mod table;

pub use auc::roc_auc;
pub use cv::{cross_validate, mean_std, stratified_holdout, CvReport, Learner, VALIDATION_FRACTION};
pub use folds::{make_folds, CvPlan};
pub use stats::{paired_test, PairedMethod, PairedTestResult, WILCOXON_EXACT_MAX};
pub use table::{ablation_table, AblationRow, AblationTable, Marker, ALPHA, BASELINE_LABEL};

use crate::data::{stack, VolumeSample};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Real;

/// Eval-mode logits for `samples`, computed `batch` at a time.
pub fn predict_scores<T: Real>(model: &Model<T>, samples: &[VolumeSample], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&VolumeSample> = chunk.iter().collect();
        let (x, _) = stack::<T>(&refs)?;
        out.extend(model.predict(&x)?.into_iter().map(Real::as_f64));
    }
    Ok(out)
}

/// AUC of the model on `samples`.
pub fn evaluate_auc<T: Real>(model: &Model<T>, samples: &[VolumeSample], batch: usize) -> Result<f64> {
    let scores = predict_scores(model, samples, batch)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    roc_auc(&scores, &labels)
}
