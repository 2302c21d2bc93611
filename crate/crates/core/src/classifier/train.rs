//! Mini-batch training with Adam and validation-loss early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::dataset::SelfLabeledDataset;
use super::network::{Network, Tensor};
use super::{AdamConfig, ClassifierConfig, ClassifierModel, TrainingMetadata};

const EVAL_CHUNK: usize = 512;

/// Mean cross-entropy of `logits` (`[k, N]`) against `labels`, and its
/// gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let (k, n) = (logits.c, logits.n);
    debug_assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(k, n, 1, 1);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    let mut z = vec![0.0; k];
    let tiny = T::min_positive_value().to_f64_lossy();
    for (s, &label) in labels.iter().enumerate() {
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = logits.data[o * n + s].to_f64_lossy();
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
        for (o, &zo) in z.iter().enumerate() {
            let p = (zo - lse).exp();
            let g = (if o == label { p - 1.0 } else { p }) * inv_n;
            // subnormal gradients from saturated outputs would slow every
            // later product to a crawl; they carry no useful signal
            grad.data[o * n + s] = if g.abs() < tiny { T::zero() } else { lit(g) };
        }
    }
    (total * inv_n, grad)
}

impl<T: Scalar> Network<T> {
    /// Mean cross-entropy using batch statistics, without touching the
    /// running averages. This is the objective whose gradient
    /// [`Network::loss_and_gradient`] returns.
    pub fn loss(&self, x: Tensor<T>, labels: &[usize]) -> f64 {
        let mut scratch = self.clone();
        let (logits, _) = scratch.forward_train(x);
        cross_entropy(&logits, labels).0
    }

    /// Loss and the full parameter gradient (same layout as `params`).
    pub fn loss_and_gradient(&self, x: Tensor<T>, labels: &[usize]) -> (f64, Vec<T>) {
        let mut scratch = self.clone();
        let (logits, caches) = scratch.forward_train(x);
        let (loss, d) = cross_entropy(&logits, labels);
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward(caches, d, &mut grads);
        (loss, grads)
    }
}

struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let step = c.learning_rate * (1.0 - c.beta2.powi(self.t)).sqrt() / (1.0 - c.beta1.powi(self.t));
        let (step, eps): (T, T) = (lit(step), lit(c.epsilon));
        let one = T::one();
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep training; `snapshot` says whether the current parameters become
    /// the ones to return.
    Continue {
        snapshot: bool,
    },
    Stop,
}

/// The stopping rule, fed one validation loss per epoch.
///
/// With patience 0 training halts on the first strict increase over the
/// previous epoch and the previous epoch's model is returned; equal losses
/// keep going. With patience `p > 0` it halts after `p + 1` consecutive
/// epochs without strict improvement over the best loss and returns the best
/// snapshot. When disabled it never stops and always snapshots.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    enabled: bool,
    patience: usize,
    previous: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(enabled: bool, patience: usize) -> Self {
        EarlyStopping {
            enabled,
            patience,
            previous: f64::INFINITY,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        if !self.enabled {
            return StopDecision::Continue { snapshot: true };
        }
        let decision = if self.patience == 0 {
            if loss > self.previous {
                StopDecision::Stop
            } else {
                StopDecision::Continue { snapshot: true }
            }
        } else if loss < self.best {
            self.stale = 0;
            StopDecision::Continue { snapshot: true }
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue { snapshot: false }
            }
        };
        self.previous = loss;
        self.best = self.best.min(loss);
        decision
    }
}

/// Trains a fresh network on `train`, early-stopping on `validation`.
pub fn train<T: Scalar>(
    train: &SelfLabeledDataset<T>,
    validation: &SelfLabeledDataset<T>,
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel<T>> {
    train_with_trace(train, validation, cfg, |_, loss| loss)
}

/// [`train`] with a hook that sees `(epoch, measured validation loss)` and
/// returns the loss the stopping rule should act on.
pub fn train_with_trace<T: Scalar>(
    train: &SelfLabeledDataset<T>,
    validation: &SelfLabeledDataset<T>,
    cfg: &ClassifierConfig,
    mut trace: impl FnMut(usize, f64) -> f64,
) -> Result<ClassifierModel<T>> {
    cfg.validate()?;
    for d in [train, validation] {
        if d.n_classes() > cfg.n_classes {
            return Err(Error::LabelOutOfRange {
                label: d.n_classes() - 1,
                classes: cfg.n_classes,
            });
        }
    }
    if train.shape() != validation.shape() {
        return Err(Error::ShapeMismatch(format!(
            "training stamps are {:?} but validation stamps are {:?}",
            train.shape(),
            validation.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::new(cfg.architecture, train.shape(), cfg.n_classes, cfg.width, &mut rng);
    let mut adam = Adam::new(cfg.optimizer, net.params.len());
    let mut grads = vec![T::zero(); net.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.early_stopping, cfg.patience);
    let mut history = Vec::new();
    let mut kept: Option<(Vec<T>, Vec<T>, usize, f64)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(batch)?;
            let (logits, caches) = net.forward_train(x);
            let (loss, d) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            grads.iter_mut().for_each(|g| *g = T::zero());
            net.backward(caches, d, &mut grads);
            adam.step(&mut net.params, &grads);
        }
        let measured = validation_loss(&net, validation)?;
        let loss = trace(epoch, measured);
        if !loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        history.push(loss);
        match stopper.observe(loss) {
            StopDecision::Continue { snapshot } => {
                if snapshot {
                    kept = Some((net.params.clone(), net.buffers.clone(), epoch, loss));
                }
            }
            StopDecision::Stop => break,
        }
    }

    let epochs_run = history.len();
    let (params, buffers, returned_epoch, validation_loss) = kept.expect("first epoch always snapshots");
    net.params = params;
    net.buffers = buffers;
    Ok(ClassifierModel {
        network: net,
        metadata: TrainingMetadata {
            seed: cfg.seed,
            epochs_run,
            returned_epoch,
            validation_loss,
            validation_history: history,
        },
    })
}

/// Mean cross-entropy over a whole self-labeled set in inference mode.
pub(crate) fn validation_loss<T: Scalar>(net: &Network<T>, d: &SelfLabeledDataset<T>) -> Result<f64> {
    let idx: Vec<usize> = (0..d.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = d.batch(chunk)?;
        let logits = net.forward_eval(x);
        total += cross_entropy(&logits, &labels).0 * chunk.len() as f64;
    }
    Ok(total / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(enabled: bool, patience: usize, trace: &[f64]) -> (usize, Option<usize>) {
        let mut s = EarlyStopping::new(enabled, patience);
        let mut kept = None;
        for (e, &l) in trace.iter().enumerate() {
            match s.observe(l) {
                StopDecision::Continue { snapshot } => {
                    if snapshot {
                        kept = Some(e + 1);
                    }
                }
                StopDecision::Stop => return (e + 1, kept),
            }
        }
        (trace.len(), kept)
    }

    #[test]
    fn patience_zero_stops_on_first_increase() {
        assert_eq!(run(true, 0, &[1.0, 0.8, 0.9, 0.1]), (3, Some(2)));
    }

    #[test]
    fn patience_zero_treats_ties_as_continue() {
        assert_eq!(run(true, 0, &[1.0, 0.8, 0.8, 0.7, 0.75]), (5, Some(4)));
    }

    #[test]
    fn positive_patience_counts_ties_as_stale() {
        // best at epoch 2; epochs 3 and 4 do not improve -> stop at 4 with p=1
        assert_eq!(run(true, 1, &[1.0, 0.5, 0.5, 0.6, 0.1]), (4, Some(2)));
        assert_eq!(run(true, 2, &[1.0, 0.5, 0.6, 0.4, 0.7, 0.8, 0.9]), (7, Some(4)));
    }

    #[test]
    fn disabled_runs_to_the_end() {
        assert_eq!(run(false, 0, &[1.0, 2.0, 3.0]), (3, Some(3)));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor {
            c: 3,
            n: 1,
            h: 1,
            w: 1,
            data: vec![1.0f64, 2.0, 3.0],
        };
        let (loss, g) = cross_entropy(&logits, &[0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((loss - (z.ln() - 1.0)).abs() < 1e-12);
        assert!((g.data[0] - (1f64.exp() / z - 1.0)).abs() < 1e-12);
        assert!((g.data[2] - 3f64.exp() / z).abs() < 1e-12);
    }
}
