use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HybridModel, ModelConfig, ModelDims};
use crate::diffnum::{adam_step, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, denormalize, targets_kmh};
use crate::preprocess::{Split, WindowSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Masked MSE on the normalized scale, averaged over the epoch's cells.
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

struct SampleGrad {
    sse: f64,
    cells: usize,
    grads: Vec<Tensor>,
}

fn sample_grad(model: &HybridModel, ws: &WindowSet, a_hat: &Tensor, s: usize) -> Result<SampleGrad> {
    let mask = ws.mask(s);
    let cells = mask.iter().filter(|&&m| m).count();
    let x = model.input_tensor(ws, s)?;
    let target: Vec<f64> = ws.target(s).iter().map(|&v| v as f64).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let av = tape.constant_ref(a_hat);
    let y = model.forward_tape(&mut tape, &model.store, xv, av)?;
    let loss = tape.masked_sse(y, &target, mask)?;
    let sse = tape.value(loss).item();
    let grads = tape.backward(loss)?.param_grads(&model.store);
    Ok(SampleGrad { sse, cells, grads })
}

/// Normalized forecasts `[k, N, H]` for the samples in `indices`.
pub fn predict_normalized(model: &HybridModel, ws: &WindowSet, a_hat: &Tensor, indices: &[usize]) -> Result<Vec<f64>> {
    model.dims.check(ws)?;
    let per: Vec<Tensor> = indices
        .par_iter()
        .map(|&s| model.forward(&model.input_tensor(ws, s)?, a_hat))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flat_map(Tensor::into_data).collect())
}

pub(super) fn evaluate(model: &HybridModel, ws: &WindowSet, a_hat: &Tensor, indices: &[usize]) -> Result<(f64, f64)> {
    let pred = predict_normalized(model, ws, a_hat, indices)?;
    let pred = denormalize(ws.norm()?, &pred, ws.nodes, ws.horizon)?;
    let (truth, mask) = targets_kmh(ws, indices)?;
    let m = compute_metrics(&pred, &truth, &mask)?;
    Ok((m.mae, m.rmse))
}

/// Trains the deep model on the training split with seeded mini-batches,
/// early-stopping on validation MAE; returns the best-epoch parameters.
///
/// Per-sample gradients may be computed in parallel but are summed in
/// sample order, so results do not depend on the thread count.
pub fn train_stage1(
    ws: &WindowSet,
    a_hat: &Tensor,
    config: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(HybridModel, TrainReport)> {
    let started = Instant::now();
    if train.batch_size == 0 || train.max_epochs == 0 {
        return Err(Error::Validation("batch_size and max_epochs must be ≥ 1".into()));
    }
    if a_hat.shape() != [ws.nodes, ws.nodes] {
        return Err(Error::Dimension(format!(
            "graph of shape {:?} for {} nodes",
            a_hat.shape(),
            ws.nodes
        )));
    }
    let train_idx = ws.indices(Split::Train);
    let val_idx = ws.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::Validation("no validation samples for early stopping".into()));
    }
    let mut model = HybridModel::init(*config, ModelDims::of(ws), ws.sensor_ids.clone(), seed)?;
    model.norm = Some(ws.norm()?.clone());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, HybridModel)> = None;
    let mut wait = 0;
    let mut stopped_early = false;
    let mut order = train_idx.clone();
    for epoch in 1..=train.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_sse, mut epoch_cells) = (0.0, 0usize);
        for batch in order.chunks(train.batch_size) {
            let results: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&s| sample_grad(&model, ws, a_hat, s))
                .collect::<Result<_>>()?;
            let cells: usize = results.iter().map(|r| r.cells).sum();
            if cells == 0 {
                log::warn!("epoch {epoch}: skipping a batch whose targets are all masked");
                continue;
            }
            let mut total = results[0].grads.clone();
            let mut sse = results[0].sse;
            for r in &results[1..] {
                sse += r.sse;
                for (t, g) in total.iter_mut().zip(&r.grads) {
                    t.add_assign(g);
                }
            }
            let inv = 1.0 / cells as f64;
            for t in total.iter_mut() {
                t.scale_in_place(inv);
            }
            adam_step(&mut model.store, &total, &train.adam)?;
            epoch_sse += sse;
            epoch_cells += cells;
        }
        if epoch_cells == 0 {
            return Err(Error::Validation("every training target is masked".into()));
        }
        let train_loss = epoch_sse / epoch_cells as f64;
        let (val_mae, val_rmse) = evaluate(&model, ws, a_hat, &val_idx)?;
        if !train_loss.is_finite() || !val_mae.is_finite() {
            return Err(Error::Computation(format!("epoch {epoch}: loss diverged")));
        }
        log::info!(
            "{} epoch {epoch}: train mse {train_loss:.5}, val mae {val_mae:.4}, val rmse {val_rmse:.4}",
            config.variant.name()
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            val_rmse,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, epoch, model.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= train.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let report = TrainReport {
        model: config.variant.name().to_string(),
        epochs,
        best_epoch,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}
