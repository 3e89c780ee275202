//! Adam and SGD updates, the warmup/inverse-sqrt learning-rate schedule and a
//! gradient-accumulating training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, STModel};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Linear warmup from `lr_init` to `lr_max` over `warmup_steps`, then
/// `lr_max * sqrt(warmup_steps / t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub lr_init: f64,
    pub warmup_steps: u64,
    pub lr_max: f64,
}

impl Default for NoamSchedule {
    fn default() -> Self {
        NoamSchedule {
            lr_init: 3e-4,
            warmup_steps: 4000,
            lr_max: 1e-3,
        }
    }
}

impl NoamSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        let w = self.warmup_steps;
        if t <= w {
            if w == 0 {
                return self.lr_max;
            }
            self.lr_init + (self.lr_max - self.lr_init) * t as f64 / w as f64
        } else {
            self.lr_max * (w as f64 / t as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    Noam(NoamSchedule),
}

impl LrSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Noam(n) => n.lr_at(t),
        }
    }
}

fn grad_of<'a>(name: &str, p: &'a Tensor) -> Result<&'a [f64]> {
    p.grad
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))
}

/// Bias-corrected Adam moments for every parameter, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// One Adam update of every parameter from its `grad` buffer.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        grad_of(name, p)?;
        if let Some(m) = state.m.get(name) {
            if m.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "optimizer state for {name} has the wrong size"
                )));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, p) in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
        p.grad = Some(g);
    }
    Ok(())
}

/// `theta <- theta - lr * grad` for every parameter.
pub fn sgd_step(params: &mut BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        grad_of(name, p)?;
    }
    for p in params.values_mut() {
        let g = p.grad.take().expect("checked above");
        p.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(x, g)| *x -= lr * g);
        p.grad = Some(g);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam(AdamState::new())
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(params, s, lr),
            Optimizer::Sgd => sgd_step(params, lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batches whose gradients are summed before each optimizer step.
    pub accum: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            accum: 16,
            epochs: 1,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Summed loss of the batches behind each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Epoch-at-a-time training driver. Gradients of `accum` consecutive batches
/// are summed and applied in one step; a partial group at the end of an epoch
/// is applied as well.
pub struct Trainer {
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    batches_seen: u64,
    report: TrainReport,
}

impl Trainer {
    pub fn new(optimizer: Optimizer, schedule: LrSchedule, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 || config.accum == 0 {
            return Err(Error::Config(
                "batch_size and accum must be positive".into(),
            ));
        }
        Ok(Trainer {
            optimizer,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            batches_seen: 0,
            report: TrainReport::default(),
        })
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn finish(self) -> TrainReport {
        self.report
    }

    /// One pass over `data` in train mode; returns the mean per-example loss.
    /// The model's previous mode is restored afterwards.
    pub fn run_epoch(&mut self, model: &mut STModel, data: &[Example<'_>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let was_training = model.is_training();
        model.set_train(true);
        let result = self.epoch_inner(model, data);
        model.set_train(was_training);
        let mean = result?;
        self.report.epoch_losses.push(mean);
        Ok(mean)
    }

    fn epoch_inner(&mut self, model: &mut STModel, data: &[Example<'_>]) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut self.rng);
        }
        model.zero_grad();
        let mut total = 0.0;
        let mut group_loss = 0.0;
        let mut pending = 0;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for chunk in order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let seed = self.config.seed ^ self.batches_seen.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.batches_seen += 1;
            let loss = model.accumulate_gradients(&batch, seed)?;
            total += loss;
            group_loss += loss;
            pending += 1;
            if pending == self.config.accum {
                self.apply(model, group_loss)?;
                group_loss = 0.0;
                pending = 0;
            }
        }
        if pending > 0 {
            self.apply(model, group_loss)?;
        }
        Ok(total / data.len() as f64)
    }

    fn apply(&mut self, model: &mut STModel, loss: f64) -> Result<()> {
        self.report.steps += 1;
        let lr = self.schedule.lr_at(self.report.steps);
        self.optimizer.step(model.params_mut(), lr)?;
        model.zero_grad();
        self.report.step_losses.push(loss);
        Ok(())
    }
}

/// Trains for `config.epochs` epochs and returns the loss history.
pub fn train_loop(
    model: &mut STModel,
    data: &[Example<'_>],
    optimizer: Optimizer,
    schedule: LrSchedule,
    config: TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let epochs = config.epochs;
    let mut trainer = Trainer::new(optimizer, schedule, config)?;
    for epoch in 0..epochs {
        let loss = trainer.run_epoch(model, data)?;
        log::info!("epoch {} mean loss {loss:.4}", epoch + 1);
    }
    Ok(trainer.finish())
}
