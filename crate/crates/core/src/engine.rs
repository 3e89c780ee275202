//! Per-request adaptation: copy the generic model, retrieve similar pairs,
//! fine-tune the copy on them, translate, drop the copy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datapool::{Hit, Pool};
use crate::error::{Error, Result};
use crate::harness::bleu_corpus;
use crate::hash::seed_from;
use crate::model::{Example, STModel};
use crate::optim::{LrSchedule, Optimizer, TrainConfig, Trainer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn fresh(self) -> Optimizer {
        match self {
            OptimizerKind::Adam => Optimizer::adam(),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Per-request fine-tuning recipe. All retrieved pairs form a single batch,
/// so `epochs` is also the number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub lr: f64,
    /// Maximum number of retrieved pairs.
    pub n: usize,
    pub epochs: usize,
    pub tau: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            lr: 1e-3,
            n: 5,
            epochs: 3,
            tau: 0.5,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.n == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "adaptation needs lr > 0, n >= 1 and epochs >= 1".into(),
            ));
        }
        // Thresholds above 1 are allowed and force an empty retrieval.
        if !self.tau.is_finite() || self.tau < -1.0 {
            return Err(Error::Config(format!(
                "tau {} must be finite and at least -1",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub translation: String,
    pub adapted: bool,
    pub retrieved: Vec<Hit>,
    pub wall_time_ms: f64,
}

/// A translation request. `exclude_id` hides one pool entry (the request's
/// own pair when the pool contains it).
#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub id: &'a str,
    pub features: &'a Tensor,
    pub exclude_id: Option<&'a str>,
}

impl<'a> Request<'a> {
    pub fn new(id: &'a str, features: &'a Tensor) -> Self {
        Request {
            id,
            features,
            exclude_id: None,
        }
    }

    pub fn excluding(mut self, id: &'a str) -> Self {
        self.exclude_id = Some(id);
        self
    }
}

fn check_features(model: &STModel, features: &Tensor) -> Result<()> {
    let k = model.config().feature_dim;
    match features.shape() {
        [_, d] if *d == k => Ok(()),
        s => Err(Error::Dimension {
            expected: k,
            got: s.last().copied().unwrap_or(0),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn adapt_run(
    generic: &STModel,
    pool: &Pool,
    hits: &[Hit],
    lr: f64,
    optimizer: OptimizerKind,
    checkpoints: &[usize],
    seed: u64,
    mut at_checkpoint: impl FnMut(&STModel) -> Result<()>,
) -> Result<STModel> {
    if hits.is_empty() {
        return Err(Error::Contract("adaptation needs at least one pair".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints.first() == Some(&0) {
        return Err(Error::Contract(
            "epoch checkpoints must be ascending and positive".into(),
        ));
    }
    let mut local = generic.clone();
    let targets: Vec<Vec<usize>> = hits
        .iter()
        .map(|h| local.vocab().target_ids(&pool.entry(h.index).translation))
        .collect();
    let batch: Vec<Example> = hits
        .iter()
        .zip(&targets)
        .map(|(h, t)| Example {
            features: &pool.entry(h.index).features,
            target: t,
        })
        .collect();
    let config = TrainConfig {
        batch_size: batch.len(),
        accum: 1,
        epochs: 0,
        seed,
        shuffle: false,
    };
    let mut trainer = Trainer::new(optimizer.fresh(), LrSchedule::Constant(lr), config)?;
    let mut done = 0;
    for &target_epochs in checkpoints {
        while done < target_epochs {
            trainer.run_epoch(&mut local, &batch)?;
            done += 1;
        }
        local.set_train(false);
        at_checkpoint(&local)?;
    }
    Ok(local)
}

/// A copy of `generic` fine-tuned for `epochs` epochs on the pool entries in
/// `hits`, all in one batch, with a fresh optimizer and constant `lr`.
pub fn adapt_copy(
    generic: &STModel,
    pool: &Pool,
    hits: &[Hit],
    lr: f64,
    optimizer: OptimizerKind,
    epochs: usize,
    seed: u64,
) -> Result<STModel> {
    adapt_run(generic, pool, hits, lr, optimizer, &[epochs], seed, |_| {
        Ok(())
    })
}

/// Fine-tunes a private copy of `generic` on `hits` and returns the greedy
/// translation after each epoch count in `checkpoints` (ascending).
#[allow(clippy::too_many_arguments)]
pub fn adapt_and_translate(
    generic: &STModel,
    pool: &Pool,
    hits: &[Hit],
    features: &Tensor,
    lr: f64,
    optimizer: OptimizerKind,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(checkpoints.len());
    adapt_run(generic, pool, hits, lr, optimizer, checkpoints, seed, |m| {
        out.push(m.translate(features)?);
        Ok(())
    })?;
    Ok(out)
}

/// Dropout seed of a request.
pub fn request_seed(id: &str) -> u64 {
    seed_from(id, 0xada9)
}

/// Translates one request with instance-based adaptation. The generic model
/// is only read; the adapted copy is dropped before returning.
pub fn ima_translate(
    generic: &STModel,
    pool: &Pool,
    request: Request<'_>,
    cfg: &AdaptationConfig,
) -> Result<RequestOutcome> {
    cfg.validate()?;
    check_features(generic, request.features)?;
    let start = Instant::now();
    let key = pool.query_key(request.features, Some(generic))?;
    let retrieved = pool
        .retrieve(&key, cfg.tau, cfg.n, request.exclude_id)?
        .hits;
    let translation = if retrieved.is_empty() {
        generic.translate(request.features)?
    } else {
        adapt_and_translate(
            generic,
            pool,
            &retrieved,
            request.features,
            cfg.lr,
            cfg.optimizer,
            &[cfg.epochs],
            request_seed(request.id),
        )?
        .remove(0)
    };
    Ok(RequestOutcome {
        translation,
        adapted: !retrieved.is_empty(),
        retrieved,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Hyper-parameter grid for adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub ns: Vec<usize>,
    pub epochs: Vec<usize>,
    pub tau: f64,
    pub optimizer: OptimizerKind,
}

impl Default for Grid {
    /// Learning rates {1,2,3} x 10^{-3,-4,-5}, n in {1,5,10}, epochs in {1,3,5}.
    fn default() -> Self {
        let lrs = [1e-3, 1e-4, 1e-5]
            .iter()
            .flat_map(|s| [1.0, 2.0, 3.0].map(|m| m * s))
            .collect();
        Grid {
            lrs,
            ns: vec![1, 5, 10],
            epochs: vec![1, 3, 5],
            tau: 0.5,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl Grid {
    pub fn single(cfg: AdaptationConfig) -> Self {
        Grid {
            lrs: vec![cfg.lr],
            ns: vec![cfg.n],
            epochs: vec![cfg.epochs],
            tau: cfg.tau,
            optimizer: cfg.optimizer,
        }
    }

    /// Every configuration, ordered by lr, then n, then epochs.
    pub fn configs(&self) -> Vec<AdaptationConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &n in &self.ns {
                for &epochs in &self.epochs {
                    out.push(AdaptationConfig {
                        lr,
                        n,
                        epochs,
                        tau: self.tau,
                        optimizer: self.optimizer,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.ns.is_empty() || self.epochs.is_empty() {
            return Err(Error::Empty("hyper-parameter grid".into()));
        }
        self.configs()
            .iter()
            .try_for_each(AdaptationConfig::validate)
    }
}

/// A validation or test segment with its reference translation.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub features: &'a Tensor,
    pub reference: &'a str,
    /// Pool entry to hide from retrieval, if any.
    pub exclude_id: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: AdaptationConfig,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: AdaptationConfig,
    pub best_bleu: f64,
    pub table: Vec<GridRow>,
}

/// `true` when `a` should be preferred over `b`: higher BLEU, then fewer
/// epochs, then smaller n, then smaller lr.
pub fn better(a: &GridRow, b: &GridRow) -> bool {
    use std::cmp::Ordering::*;
    match a.bleu.total_cmp(&b.bleu) {
        Greater => true,
        Less => false,
        Equal => {
            (a.config.epochs, a.config.n)
                .cmp(&(b.config.epochs, b.config.n))
                .then(a.config.lr.total_cmp(&b.config.lr))
                == Less
        }
    }
}

/// Translations of `items` under every grid configuration, in
/// [`Grid::configs`] order. One adaptation run per (item, lr, effective n)
/// is decoded at every epoch count of the grid.
pub fn grid_translations(
    generic: &STModel,
    pool: &Pool,
    items: &[EvalItem<'_>],
    grid: &Grid,
) -> Result<Vec<Vec<String>>> {
    grid.validate()?;
    let configs = grid.configs();
    let mut epochs: Vec<usize> = grid.epochs.clone();
    epochs.sort_unstable();
    epochs.dedup();
    let n_max = *grid.ns.iter().max().expect("validated");
    let mut out = vec![Vec::with_capacity(items.len()); configs.len()];
    for item in items {
        check_features(generic, item.features)?;
        let key = pool.query_key(item.features, Some(generic))?;
        let hits = pool.retrieve(&key, grid.tau, n_max, item.exclude_id)?.hits;
        let mut static_out: Option<String> = None;
        let mut runs: std::collections::HashMap<(u64, usize), Vec<String>> = Default::default();
        for (ci, cfg) in configs.iter().enumerate() {
            let used = cfg.n.min(hits.len());
            let text = if used == 0 {
                if static_out.is_none() {
                    static_out = Some(generic.translate(item.features)?);
                }
                static_out.clone().expect("set above")
            } else {
                let key = (cfg.lr.to_bits(), used);
                if let std::collections::hash_map::Entry::Vacant(slot) = runs.entry(key) {
                    let decoded = adapt_and_translate(
                        generic,
                        pool,
                        &hits[..used],
                        item.features,
                        cfg.lr,
                        cfg.optimizer,
                        &epochs,
                        request_seed(item.id),
                    )?;
                    slot.insert(decoded);
                }
                let pos = epochs
                    .iter()
                    .position(|&e| e == cfg.epochs)
                    .expect("epoch in grid");
                runs[&key][pos].clone()
            };
            out[ci].push(text);
        }
    }
    Ok(out)
}

/// Scores every grid configuration on `items` by corpus BLEU and returns the
/// best one with the full table.
pub fn grid_search(
    generic: &STModel,
    pool: &Pool,
    items: &[EvalItem<'_>],
    grid: &Grid,
) -> Result<GridResult> {
    if items.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let translations = grid_translations(generic, pool, items, grid)?;
    let refs: Vec<&str> = items.iter().map(|i| i.reference).collect();
    let mut table = Vec::with_capacity(translations.len());
    for (cfg, hyps) in grid.configs().into_iter().zip(&translations) {
        table.push(GridRow {
            config: cfg,
            bleu: bleu_corpus(hyps, &refs)?,
        });
    }
    let mut best = &table[0];
    for row in &table[1..] {
        if better(row, best) {
            best = row;
        }
    }
    Ok(GridResult {
        best: best.config,
        best_bleu: best.bleu,
        table,
    })
}

/// Adapts on the single least-similar pool pair and decodes after each
/// epoch count in `checkpoints`.
pub fn least_similar_translations(
    generic: &STModel,
    pool: &Pool,
    item: EvalItem<'_>,
    lr: f64,
    optimizer: OptimizerKind,
    checkpoints: &[usize],
) -> Result<Vec<String>> {
    check_features(generic, item.features)?;
    let key = pool.query_key(item.features, Some(generic))?;
    match pool.least_similar(&key, item.exclude_id)? {
        Some(hit) => adapt_and_translate(
            generic,
            pool,
            &[hit],
            item.features,
            lr,
            optimizer,
            checkpoints,
            request_seed(item.id),
        ),
        None => {
            let t = generic.translate(item.features)?;
            Ok(vec![t; checkpoints.len()])
        }
    }
}
