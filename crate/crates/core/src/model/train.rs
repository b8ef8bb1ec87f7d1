use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::features::Normalization;
use super::net::{ModelState, ParamTensor};
use super::predict::window_starts;
use crate::data::{RoadNetwork, SpeedPanel, WINDOW};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss (MAE in normalised units).
    pub train_loss: f64,
    /// Validation MAE in panel speed units.
    pub val_mae: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<ParamTensor>,
    v: Vec<ParamTensor>,
}

impl Adam {
    fn new(params: &[ParamTensor], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    fn update(&mut self, params: &mut [ParamTensor], grads: &[ParamTensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

/// Validation MAE in speed units over every complete window of `panel`.
pub(crate) fn validation_mae(model: &ModelState, panel: &SpeedPanel) -> Result<f64> {
    let starts = window_starts(panel.len(), true);
    if starts.is_empty() {
        return Err(Error::invalid("validation split has no complete 24-step window"));
    }
    let map = model.road_map(panel)?;
    let preds = model.predict(panel, &starts)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (w, &s) in starts.iter().enumerate() {
        for (m, &p) in map.iter().enumerate() {
            for q in 0..WINDOW {
                sum += (preds.values[w][m][q] - panel.value(p, s + WINDOW + q)).abs();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Fit a model on `train`, early-stopping on validation MAE.
///
/// Loss is MAE on normalised speeds. The returned state holds the parameters
/// of the best validation epoch. With zero epochs the initialised, untrained
/// state is returned.
pub fn train(
    train: &SpeedPanel,
    val: &SpeedPanel,
    graph: &RoadNetwork,
    config: &ModelConfig,
) -> Result<ModelState> {
    config.validate()?;
    if train.unit() != val.unit() {
        return Err(Error::UnitMismatch(train.unit().to_string(), val.unit().to_string()));
    }
    let order: Vec<usize> = graph
        .roads()
        .iter()
        .map(|r| train.road_index(r).ok_or_else(|| Error::UnknownRoad(r.to_string())))
        .collect::<Result<_>>()?;
    let norm = Normalization::fit(&train.select_roads(&order));
    let mut model = ModelState::init(graph.clone(), norm, config.clone())?;
    if config.epochs == 0 {
        return Ok(model);
    }
    if !train.is_complete() || !val.is_complete() {
        return Err(Error::invalid("training panels must be filled before training"));
    }
    let all_windows = window_starts(train.len(), true);
    if all_windows.is_empty() {
        return Err(Error::invalid("training split has no complete 24-step window"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut best: Option<(f64, Vec<ParamTensor>)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let map = model.road_map(train)?;

    for epoch in 0..config.epochs {
        let mut windows = all_windows.clone();
        windows.shuffle(&mut rng);
        if let Some(cap) = config.windows_per_epoch {
            windows.truncate(cap);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in windows.chunks(config.batch_size).enumerate() {
            let batch = model.build_batch(train, &map, chunk)?;
            let target = Arc::new(model.targets(train, &map, chunk)?);
            let mut fwd = model.forward(&batch, None);
            let loss = fwd.tape.l1_loss(fwd.pred, target);
            let value = fwd.tape.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            let grads: Vec<ParamTensor> = fwd
                .tape
                .backward(loss, model.param_count())
                .into_iter()
                .zip(model.params())
                .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.dim())))
                .collect();
            let norm_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
            if !norm_sq.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: norm_sq,
                });
            }
            let norm = norm_sq.sqrt();
            let grads = if norm > config.grad_clip {
                let s = config.grad_clip / norm;
                grads.into_iter().map(|g| g * s).collect()
            } else {
                grads
            };
            adam.update(&mut model.params, &grads);
            loss_sum += value;
            batches += 1;
        }
        let val_mae = validation_mae(&model, val)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mae,
        };
        tracing::info!(epoch, train_loss = stats.train_loss, val_mae, "epoch finished");
        history.push(stats);
        if best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
            best = Some((val_mae, model.params().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.trained = true;
    model.history = history;
    Ok(model)
}
