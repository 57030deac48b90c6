//! Minibatch training with early stopping on validation MSE.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{DatasetSplit, SeriesWindow};
use crate::error::{HtvError, Result};
use crate::model::HtvModel;
use crate::objective::{evaluate, forward_step, LossBreakdown, Metrics, Sampling};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rng::{Seeds, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 10,
            batch: 16,
            patience: 3,
            max_steps: None,
            clip_norm: Some(10.0),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub recon: f64,
    pub pred: f64,
    pub kl: Vec<f64>,
    pub total: f64,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation snapshot, or the final parameters without a val split.
    pub model: HtvModel,
    pub log: Vec<EpochRecord>,
    /// Minibatch-mean total of every optimizer step, in order.
    pub step_totals: Vec<f64>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
}

/// Mean loss over `batch`, backpropagated into fresh parameter leaves.
/// Returns the averaged breakdown and one gradient per parameter tensor.
pub fn batch_gradient(
    model: &HtvModel,
    batch: &[&SeriesWindow],
    rng: &mut rand_chacha::ChaCha8Rng,
    step: usize,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params.register(&tape);
    let mut losses = Vec::with_capacity(batch.len());
    let mut acc = None;
    for w in batch {
        let out = forward_step(&tape, &p, model, w, Sampling::Random(rng), step)?;
        losses.push(out.loss);
        acc = Some(match acc {
            None => out.total,
            Some(a) => out.total.add(a)?,
        });
    }
    let total = acc
        .ok_or_else(|| HtvError::EmptyDataset("empty minibatch".into()))?
        .scale(1.0 / batch.len() as f64);
    total.backward()?;
    let grads = p
        .iter()
        .zip(model.params.tensors())
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect::<Vec<_>>();
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(HtvError::Divergence {
            term: format!("grad[{}]", model.params.names()[bad]),
            step,
        });
    }
    Ok((LossBreakdown::average(&losses).expect("non-empty"), grads))
}

/// Trains `model` on `split.train`. `sink` sees each epoch record as it is
/// produced, so a divergence still leaves the last finite record behind.
pub fn train(
    mut model: HtvModel,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seeds: Seeds,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if split.train.is_empty() && cfg.epochs > 0 {
        return Err(HtvError::EmptyDataset("training split has no windows".into()));
    }
    if cfg.batch == 0 {
        return Err(HtvError::config("batch", "must be positive"));
    }
    let mut shuffle_rng = seeds.stream(Stream::Shuffle);
    let mut sample_rng = seeds.stream(Stream::Sampling);
    let mut opt = Adam::new(cfg.adam, model.params.tensors());
    let has_val = !split.val.is_empty();

    let mut log = Vec::new();
    let mut step_totals = Vec::new();
    let mut steps = 0usize;
    let mut best: Option<(usize, Metrics, HtvModel)> = None;
    let mut stale = 0usize;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        if steps >= cap {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            if steps >= cap {
                break;
            }
            let batch: Vec<&SeriesWindow> = chunk.iter().map(|&i| &split.train[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch, &mut sample_rng, steps + 1)?;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            opt.update(model.params.tensors_mut(), &grads)?;
            steps += 1;
            step_totals.push(loss.total);
            epoch_losses.push(loss);
        }
        let mean = LossBreakdown::average(&epoch_losses).expect("at least one step per epoch");
        let val = if has_val {
            Some(evaluate(&model, &split.val)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            step: steps,
            recon: mean.recon_nll,
            pred: mean.pred_nll,
            kl: mean.kl_per_layer.clone(),
            total: mean.total,
            val_mse: val.map(|m| m.mse),
            val_mae: val.map(|m| m.mae),
        };
        sink(&record)?;
        log.push(record);

        if let Some(m) = val {
            if best.as_ref().is_none_or(|(_, b, _)| m.mse < b.mse) {
                best = Some((epoch, m, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (model, best_epoch, best_val) = match best {
        Some((e, m, snapshot)) => (snapshot, Some(e), Some(m)),
        None => (model, None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        step_totals,
        steps,
        best_epoch,
        best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chrono_split, generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;

    fn fixture() -> (HtvModel, DatasetSplit) {
        let series = generate_synthetic(&SynthSpec::benchmark(2, 160, 1)).unwrap();
        let split = chrono_split(&series, (0.6, 0.2, 0.2), 8, 4, 2).unwrap();
        let cfg = ModelConfig::new(8, 4, 2, 4, 2, 2);
        let model = HtvModel::new(cfg, &mut Seeds::new(5).stream(Stream::Init)).unwrap();
        (model, split)
    }

    fn run(model: HtvModel, split: &DatasetSplit, cfg: &TrainConfig) -> TrainOutcome {
        train(model, split, cfg, Seeds::new(5), &mut |_| Ok(())).unwrap()
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let (model, split) = fixture();
        let mut cfg = TrainConfig::default();
        cfg.adam.lr = 0.0;
        cfg.epochs = 2;
        cfg.patience = 0;
        let out = run(model.clone(), &split, &cfg);
        assert_eq!(out.model.params, model.params);
        let a = &out.log[0];
        let b = &out.log[1];
        assert_eq!(a.val_mse, b.val_mse);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (model, split) = fixture();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = run(model.clone(), &split, &cfg);
        assert_eq!(out.model.params, model.params);
        assert!(out.log.is_empty());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn max_steps_caps_training() {
        let (model, split) = fixture();
        let cfg = TrainConfig {
            epochs: 100,
            batch: 4,
            patience: 0,
            max_steps: Some(7),
            ..TrainConfig::default()
        };
        let out = run(model, &split, &cfg);
        assert_eq!(out.steps, 7);
        assert_eq!(out.step_totals.len(), 7);
    }

    #[test]
    fn equal_seeds_equal_logs() {
        let (model, split) = fixture();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 8,
            ..TrainConfig::default()
        };
        let a = run(model.clone(), &split, &cfg);
        let b = run(model, &split, &cfg);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn best_snapshot_matches_reported_metrics() {
        let (model, split) = fixture();
        let cfg = TrainConfig {
            epochs: 4,
            batch: 8,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = run(model, &split, &cfg);
        let val = evaluate(&out.model, &split.val).unwrap();
        assert_eq!(Some(val), out.best_val);
        let best = out.log.iter().filter_map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(val.mse, best);
    }
}
