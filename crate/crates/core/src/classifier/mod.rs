//! Softmax classifiers over stamps and their training loop.

mod checkpoint;
mod dataset;
mod network;
mod train;

pub use checkpoint::{
    read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, GSCM_MAGIC, GSCM_VERSION,
};
pub use dataset::{build_self_labeled, SelfLabeledDataset};
pub use network::{Architecture, Network, Tensor};
pub use train::{cross_entropy, train, train_with_trace, EarlyStopping, StopDecision};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::Stamp;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub n_classes: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    /// `false` runs exactly `max_epochs` epochs and returns the last model.
    pub early_stopping: bool,
    pub seed: u64,
    /// Base channel count of `compact_cnn`.
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            architecture: Architecture::CompactCnn,
            n_classes: 2,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            max_epochs: 30,
            patience: 0,
            early_stopping: true,
            seed: 0,
            width: 8,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.architecture == Architecture::CompactCnn && self.width == 0 {
            return Err(Error::InvalidConfig("compact_cnn width must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    /// Epochs actually trained (including the one that triggered a stop).
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were returned.
    pub returned_epoch: usize,
    /// Validation loss of the returned parameters.
    pub validation_loss: f64,
    pub validation_history: Vec<f64>,
}

/// Anything that maps a batch of stamps to probability vectors.
pub trait Classifier<T: Scalar>: Sync {
    fn n_classes(&self) -> usize;

    fn predict_softmax(&self, batch: &[Stamp<T>]) -> Result<Vec<Vec<f64>>>;
}

/// A trained network together with its training record.
#[derive(Clone, Debug)]
pub struct ClassifierModel<T> {
    pub network: Network<T>,
    pub metadata: TrainingMetadata,
}

const PREDICT_CHUNK: usize = 256;

impl<T: Scalar> ClassifierModel<T> {
    pub fn architecture(&self) -> Architecture {
        self.network.architecture()
    }

    /// Raw logits, one `k`-vector per stamp.
    pub fn logits(&self, batch: &[Stamp<T>]) -> Result<Vec<Vec<f64>>> {
        let (c, h, w) = self.network.input_shape();
        let k = self.network.n_classes();
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(PREDICT_CHUNK) {
            let mut x = Tensor::zeros(c, chunk.len(), h, w);
            for (slot, s) in chunk.iter().enumerate() {
                if s.shape() != (c, h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "model expects {c}x{h}x{w} stamps, got {}x{}x{}",
                        s.channels(),
                        s.height(),
                        s.width()
                    )));
                }
                dataset::write_sample(&mut x, slot, s);
            }
            let y = self.network.forward_eval(x);
            for s in 0..chunk.len() {
                out.push((0..k).map(|o| y.data[o * chunk.len() + s].to_f64_lossy()).collect());
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Classifier<T> for ClassifierModel<T> {
    fn n_classes(&self) -> usize {
        self.network.n_classes()
    }

    fn predict_softmax(&self, batch: &[Stamp<T>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(batch)?.iter().map(|l| softmax(l)).collect())
    }
}

/// Max-subtracted softmax. Entries are clamped away from exact 0 and 1 so
/// that every output stays strictly inside (0, 1); the sum is then off by at
/// most a few ulps.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v = (*v / s).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0; 4]);
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&[10.0, 0.0, 0.0]);
        assert!(p[0] > 0.999);
        let want = 1.0 / (1.0 + 2.0 * (-10f64).exp());
        assert!((p[0] - want).abs() < 1e-15);
        let huge = softmax(&[1000.0, -1000.0]);
        assert!(huge.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::default().validate().is_ok());
        let bad = ClassifierConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
