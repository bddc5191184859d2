//! Mini-batch training and evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use ctxnorm::{Error, Result, Rng};

use crate::data::Dataset;
use crate::metrics::{Confusion, MetricLog, MetricRow, Metrics};
use crate::model::Model;
use crate::norm_layer::Mode;
use crate::optim::{Optimizer, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, seed: 0, optimizer: OptimizerConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        self.optimizer.validate()
    }
}

/// Evaluation data passed to [`train`]: a dataset and its context ids.
pub type EvalSet<'a> = (&'a Dataset, Option<&'a [usize]>);

fn check_ids(data: &Dataset, ids: Option<&[usize]>) -> Result<()> {
    match ids {
        Some(ids) if ids.len() != data.len() => {
            Err(Error::Shape(format!("{} context ids for {} samples", ids.len(), data.len())))
        }
        _ => Ok(()),
    }
}

/// Batches of consecutive indices from `order`; a trailing batch with a
/// single sample is dropped because batch statistics need two.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|b| b.len() >= 2)
}

fn run_pass(model: &mut Model, data: &Dataset, ids: Option<&[usize]>, batch_size: usize, mode: Mode) -> Result<Metrics> {
    check_ids(data, ids)?;
    let order: Vec<usize> = (0..data.len()).collect();
    let mut confusion = Confusion::new(data.classes);
    let mut loss_sum = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        let x = data.inputs.select_rows(batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let bids = ids.map(|ids| batch.iter().map(|&i| ids[i]).collect::<Vec<_>>());
        let (loss, cache) = model.forward_loss(&x, &labels, bids.as_deref(), mode)?;
        loss_sum += loss * batch.len() as f64;
        confusion.add(&labels, &cache.predictions);
    }
    Ok(confusion.metrics(loss_sum / data.len().max(1) as f64))
}

/// Metrics over `data` with inference-mode normalization. Layers whose
/// running statistics were never updated use batch statistics instead.
pub fn evaluate(model: &mut Model, data: &Dataset, ids: Option<&[usize]>, batch_size: usize) -> Result<Metrics> {
    run_pass(model, data, ids, batch_size, Mode::Eval)
}

/// Trains in place and returns per-epoch metrics.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    ids: Option<&[usize]>,
    cfg: &TrainConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<MetricLog> {
    train_observed(model, data, ids, cfg, eval, |_, _| {})
}

/// [`train`] with a callback after every optimizer step, given the model
/// and the number of steps taken so far.
pub fn train_observed(
    model: &mut Model,
    data: &Dataset,
    ids: Option<&[usize]>,
    cfg: &TrainConfig,
    eval: Option<EvalSet<'_>>,
    mut on_step: impl FnMut(&Model, u64),
) -> Result<MetricLog> {
    cfg.validate()?;
    check_ids(data, ids)?;
    let mut log = MetricLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let steps_per_epoch = data.len() / cfg.batch_size + usize::from(data.len() % cfg.batch_size >= 2);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), (steps_per_epoch * cfg.epochs) as u64)?;
    let mut shuffle = Rng::with_stream(cfg.seed, u64::MAX);

    log.rows.push(MetricRow::new(0, "train", run_pass(model, data, ids, cfg.batch_size, Mode::Probe)?));
    if let Some((set, set_ids)) = eval {
        log.rows.push(MetricRow::new(0, "eval", evaluate(model, set, set_ids, cfg.batch_size)?));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        shuffle.shuffle(&mut order);
        let mut confusion = Confusion::new(data.classes);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            let x = data.inputs.select_rows(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let bids = ids.map(|ids| batch.iter().map(|&i| ids[i]).collect::<Vec<_>>());
            let (loss, cache) = model.forward_loss(&x, &labels, bids.as_deref(), Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", opt.steps + 1)));
            }
            let grads = model.backward(&cache)?;
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at step {}", opt.steps + 1)));
            }
            opt.step(model.params_mut(), &grads)?;
            on_step(model, opt.steps);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            confusion.add(&labels, &cache.predictions);
        }
        log.epoch_seconds.push(start.elapsed().as_secs_f64());
        log.rows.push(MetricRow::new(epoch, "train", confusion.metrics(loss_sum / seen.max(1) as f64)));
        if let Some((set, set_ids)) = eval {
            log.rows.push(MetricRow::new(epoch, "eval", evaluate(model, set, set_ids, cfg.batch_size)?));
        }
    }
    Ok(log)
}
