//! Ranking plus contrastive objective over a toy hashed-feature encoder.

mod batch;
mod encoder;
mod loss;
mod synthetic;
mod train;

pub use batch::{
    assemble_batch, evaluate, grad_check, Batch, Evaluation, Member, PreparedBatch, TrainingExample, GRAD_CHECK_FLOOR,
    GRAD_CHECK_SAMPLES,
};
pub use encoder::{feature_bucket, featurize, passage_vector, position_weight, EncoderParams, Features};
pub use loss::{cl_loss, combined_loss, dot, log_sum_exp, rank_loss};
pub use synthetic::synthetic_corpus;
pub use train::{similarity_stats, train, train_toy, SimilarityStats, StepMetrics, TrainingReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub hard_negatives: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            hard_negatives: 1,
            temperature: 0.0012,
            alpha: 1.0,
            learning_rate: 1e-5,
            steps: 200,
            seed: 0,
            feature_dim: 1024,
            embedding_dim: 32,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        // zero is allowed so a run can be replayed without updates
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be non-negative, got {}", self.init_scale));
        }
        Ok(())
    }

    pub fn initial_params(&self) -> EncoderParams {
        EncoderParams::random(self.feature_dim, self.embedding_dim, self.init_scale, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { alpha: -0.1, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        }
    }
}
