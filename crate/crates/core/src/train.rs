//! Mini-batch training and evaluation loops shared by both tasks.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;

use crate::encoding::Dropout;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::knowledge::FactCache;
use crate::matching::{Instance, ResponseModel};
use crate::metrics::MetricReport;
use crate::mrc::{MrcInstance, MrcModel};
use crate::numerics::{Grads, Params, Tape, Var};
use crate::optim::{AdamW, OptimConfig};
use crate::seeding;

/// A model trained by minimising a per-item loss.
pub trait Objective: Sync {
    type Item: Sync;

    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// `seed` drives any training-time randomness for this item.
    fn item_loss(&self, tape: &mut Tape, item: &Self::Item, seed: u64) -> Result<Var>;
}

impl Objective for ResponseModel {
    type Item = Instance;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn item_loss(&self, tape: &mut Tape, item: &Instance, seed: u64) -> Result<Var> {
        let rate = self.encoder.config.dropout;
        if rate > 0.0 {
            let mut rng = seeding::rng(seed);
            let mut d = Dropout { rate, rng: &mut rng };
            self.loss(tape, item, Some(&mut d))
        } else {
            self.loss(tape, item, None)
        }
    }
}

impl Objective for MrcModel {
    type Item = MrcInstance;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn item_loss(&self, tape: &mut Tape, item: &MrcInstance, _seed: u64) -> Result<Var> {
        self.loss(tape, item)
    }
}

/// Mean loss and mean gradient over `batch`. Items are processed on `exec`
/// and reduced in input order.
pub fn batch_gradient<O: Objective>(obj: &O, batch: &[O::Item], seeds: &[u64], exec: Exec) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per_item = exec.try_map(batch, |i, item| {
        let mut tape = Tape::with_params(obj.params());
        let loss = obj.item_loss(&mut tape, item, seeds[i])?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok::<_, Error>((value, tape.param_grads(&grads)))
    })?;
    let mut total = Grads::empty(obj.params().len());
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            optim: OptimConfig::default(),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: Option<MetricReport>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let dev = self
            .dev
            .as_ref()
            .map(|r| format!(" dev_primary={:.4}", r.primary()))
            .unwrap_or_default();
        format!("epoch={} loss={:.6}{dev} seconds={:.2}", self.epoch, self.mean_loss, self.seconds)
    }
}

/// Runs `cfg.epochs` epochs. After each one `evaluate` scores the model on
/// held-out data and `on_epoch` sees the finished log, e.g. to persist the
/// model.
pub fn train<O, E, H>(obj: &mut O, items: &[O::Item], cfg: &TrainConfig, mut evaluate: E, mut on_epoch: H) -> Result<Vec<EpochLog>>
where
    O: Objective,
    O::Item: Clone,
    E: FnMut(&O) -> Result<Option<MetricReport>>,
    H: FnMut(&O, &EpochLog) -> Result<()>,
{
    if items.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.optim, obj.params(), steps_per_epoch * cfg.epochs);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seeding::rng(seeding::derive_n(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<O::Item> = chunk.iter().map(|&i| items[i].clone()).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| seeding::derive_n(cfg.seed, &[epoch as u64, b as u64, i as u64]))
                .collect();
            let (loss, grads) = batch_gradient(obj, &batch, &seeds, cfg.exec)?;
            loss_sum += loss * chunk.len() as f64;
            obj.params_mut().accumulate(&grads);
            opt.step(obj.params_mut());
        }
        let dev = evaluate(obj)?;
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / items.len() as f64,
            dev,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("{}", log.line());
        on_epoch(obj, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Match scores of every candidate, one list per example.
pub fn score_dialogues(model: &ResponseModel, examples: &[Vec<Instance>], exec: Exec) -> Result<Vec<(Vec<f64>, Vec<u8>)>> {
    exec.try_map(examples, |_, cands| {
        let scores = cands
            .iter()
            .map(|c| model.score(&c.packed, &c.example_id))
            .collect::<Result<Vec<_>>>()?;
        Ok((scores, cands.iter().map(|c| c.label).collect()))
    })
}

pub fn evaluate_dialogues(model: &ResponseModel, examples: &[Vec<Instance>], exec: Exec) -> Result<MetricReport> {
    MetricReport::ranking(&score_dialogues(model, examples, exec)?)
}

/// Option probabilities for every example. Fact vectors are computed
/// once per call and shared across examples.
pub fn score_mrc(model: &MrcModel, examples: &[MrcInstance], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let cache = FactCache::new(0);
    exec.try_map(examples, |_, inst| model.probabilities(inst, Some(&cache)))
}

pub fn evaluate_mrc(model: &MrcModel, examples: &[MrcInstance], exec: Exec) -> Result<MetricReport> {
    let probs = score_mrc(model, examples, exec)?;
    let preds: Vec<usize> = probs.iter().map(|p| crate::metrics::ranking(p)[0]).collect();
    let golds: Vec<usize> = examples.iter().map(|e| e.answer).collect();
    let n = examples.first().map_or(0, |e| e.packed.len());
    MetricReport::classification(&preds, &golds, n)
}
