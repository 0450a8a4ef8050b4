use dvox::data::VolumeSample;
use dvox::eval::{predict_scores, Learner};
use dvox::model::{Checkpoint, Model, ModelConfig};
use dvox::train::{finetune, train, TrainConfig};
use dvox::{Real, Result, Rng};

/// Trains a fresh network per fold, or fine-tunes one from `source`.
pub struct NetLearner<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: Option<Checkpoint<T>>,
}

impl<T: Real> Learner for NetLearner<T> {
    fn fit_and_score(
        &self,
        train_set: &[VolumeSample],
        val: &[VolumeSample],
        test: &[VolumeSample],
        seed: u64,
    ) -> Result<Vec<f64>> {
        // Shared by every configuration on the same fold, so shared parameters
        // start identical across an ablation.
        let rng = Rng::new(seed);
        let model_cfg = ModelConfig {
            seed: rng.split_by_name("model").next_u64(),
            ..self.model.clone()
        };
        let cfg = TrainConfig {
            seed: rng.split_by_name("train").next_u64(),
            ..self.train.clone()
        };
        let outcome = match &self.source {
            Some(ckpt) => finetune(ckpt, model_cfg, train_set, val, &cfg)?.0,
            None => train(Model::<T>::new(model_cfg)?, train_set, val, &cfg)?,
        };
        predict_scores(&outcome.model, test, cfg.batch_size.max(8))
    }
}
