//! Minibatch training with Adam, per-epoch evaluation, and the
//! convergence-epoch metric.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, AdamConfig, AdamState, Tape};
use crate::error::{Error, Result};
use crate::kernel::Backend;
use crate::nn::Model;
use crate::numerics::{RealTensor, SeededRng};

/// Tolerance on the smallest eigenvalue of Γ checked after every epoch.
pub const GAMMA_PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evaluate and emit a metrics row every this many epochs (and always
    /// after the last one).
    pub eval_every: usize,
    /// Use shot estimates in the training forward pass. Gradients always
    /// go through the exact scores.
    pub shots_in_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.009,
            eval_every: 1,
            shots_in_training: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One token sequence with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: RealTensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-indexed.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and accuracy of `model` on `samples`.
///
/// With the shot backend each sample draws from `rng.split("{i}")`.
pub fn evaluate(model: &Model, samples: &[Sample], backend: Backend, rng: &SeededRng) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let sample_rng = rng.split(&i.to_string());
        let logits = model.logits(&s.tokens, backend, Some(&sample_rng))?;
        loss += cross_entropy(&logits, s.label)?.0;
        if argmax(&logits) == s.label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Mean loss over a batch and the gradient of every model parameter, in
/// store order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
    backend: Backend,
    rng: &SeededRng,
) -> Result<(f64, Vec<RealTensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let sample_rng = rng.split(&i.to_string());
        let logits = model.forward(&mut tape, &bound, &s.tokens, backend, Some(&sample_rng))?;
        losses.push(tape.cross_entropy(logits, s.label)?);
    }
    let loss = tape.mean(&losses)?;
    let grads = tape.backward(loss)?;
    let out = bound
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((tape.value(loss).data()[0], out))
}

/// Trains `model` in place.
///
/// Each epoch shuffles with `rng.split("shuffle/epoch/{e}")`, runs Adam over
/// minibatches (the final short batch included), checks that every Γ is
/// PSD, then evaluates both splits. `on_epoch` sees every emitted row as
/// soon as it exists, so a divergence error still leaves earlier rows
/// recorded.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    rng: &SeededRng,
    mut on_epoch: impl FnMut(&MetricsRow, &Model) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and test splits".into(),
        ));
    }
    let configured = model.config().kernel.backend;
    let train_backend = if cfg.shots_in_training {
        configured
    } else {
        Backend::Exact
    };
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let start = Instant::now();
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.split(&format!("shuffle/epoch/{epoch}")).shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch_rng = rng.split(&format!("train/{epoch}/{b}"));
            let (loss, grads) = batch_gradients(model, &batch, train_backend, &batch_rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite training loss {loss}"),
                });
            }
            adam.step(model.params_mut(), &grads, epoch)?;
        }
        let min_eig = model.min_gamma_eigenvalue()?;
        if min_eig < -GAMMA_PSD_TOLERANCE {
            return Err(Error::Internal(format!(
                "attention covariance lost positive semidefiniteness at epoch {epoch}: min eigenvalue {min_eig:e}"
            )));
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let tr = evaluate(
            model,
            train_set,
            configured,
            &rng.split(&format!("eval/train/{epoch}")),
        )?;
        let te = evaluate(
            model,
            test_set,
            configured,
            &rng.split(&format!("eval/test/{epoch}")),
        )?;
        if !tr.loss.is_finite() || !te.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: "non-finite evaluation loss".into(),
            });
        }
        let row = MetricsRow {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            test_loss: te.loss,
            test_acc: te.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, test loss {:.4} acc {:.3}",
            row.train_loss,
            row.train_acc,
            row.test_loss,
            row.test_acc
        );
        on_epoch(&row, model)?;
        rows.push(row);
    }
    Ok(rows)
}

/// First 1-indexed epoch whose accuracy reaches `fraction` of the peak.
/// `None` for an empty series.
pub fn convergence_epoch(accuracies: &[f64], fraction: f64) -> Option<usize> {
    let peak = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = fraction * peak;
    accuracies.iter().position(|&a| a >= threshold).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_epoch(&[0.2, 0.5, 0.8, 0.9, 0.88], 0.95), Some(4));
        assert_eq!(convergence_epoch(&[0.4; 7], 0.95), Some(1));
        let rising: Vec<f64> = (1..=20).map(|e| e as f64 / 20.0).collect();
        assert_eq!(convergence_epoch(&rising, 0.95), Some(19));
        assert_eq!(convergence_epoch(&[], 0.95), None);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    fn toy_samples(rng: &mut SeededRng, count: usize, classes: usize) -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let label = i % classes;
                let centre = if label == 0 { -1.0 } else { 1.0 };
                let data = (0..8).map(|_| centre + rng.uniform(-0.3, 0.3)).collect();
                Sample {
                    tokens: RealTensor::new(vec![2, 4], data).unwrap(),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn single_epoch_emits_one_row() {
        let mut rng = SeededRng::new(1);
        let data = toy_samples(&mut rng, 4, 2);
        let mut model = Model::init(ModelConfig::new(2, 4, 2), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let rows = train(&mut model, &data, &data, &cfg, &SeededRng::new(2), |_, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 1);
    }

    #[test]
    fn separable_toy_loss_falls() {
        let mut rng = SeededRng::new(3);
        let data = toy_samples(&mut rng, 16, 2);
        let mut model = Model::init(ModelConfig::new(2, 4, 2), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let rows = train(&mut model, &data, &data, &cfg, &SeededRng::new(4), |_, _| Ok(())).unwrap();
        let trailing = |k: usize| rows[k - 5..k].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
        for k in 6..=rows.len() {
            assert!(
                trailing(k) <= trailing(k - 1) + 1e-12,
                "trailing mean rose at epoch {k}"
            );
        }
        assert_eq!(rows.last().unwrap().train_acc, 1.0);
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let run = || {
            let mut rng = SeededRng::new(5);
            let data = toy_samples(&mut rng, 10, 2);
            let mut model = Model::init(ModelConfig::new(2, 4, 2), &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 3,
                ..TrainConfig::default()
            };
            let rows = train(&mut model, &data, &data, &cfg, &SeededRng::new(6), |_, _| Ok(())).unwrap();
            rows.iter()
                .map(|r| [r.train_loss, r.train_acc, r.test_loss, r.test_acc])
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn eval_cadence_thins_rows() {
        let mut rng = SeededRng::new(7);
        let data = toy_samples(&mut rng, 4, 2);
        let mut model = Model::init(ModelConfig::new(2, 4, 2), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let rows = train(&mut model, &data, &data, &cfg, &SeededRng::new(8), |_, _| Ok(())).unwrap();
        let epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 5]);
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let mut rng = SeededRng::new(9);
        let data = toy_samples(&mut rng, 4, 2);
        let mut model = Model::init(ModelConfig::new(2, 4, 2), &mut rng).unwrap();
        let err = train(&mut model, &data, &[], &TrainConfig::default(), &rng, |_, _| {
            Ok(())
        });
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
