//! Experiment scenarios: intra-domain, multi-domain and cross-domain
//! adaptation, plus the least-similar-pair ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bleu_corpus;
use crate::corpus::{generate_corpus, DomainSpec, Split, Utterance};
use crate::datapool::{KeyKind, Pool, PoolItem};
use crate::engine::{
    grid_search, grid_translations, least_similar_translations, AdaptationConfig, EvalItem, Grid,
};
use crate::error::{Error, Result};
use crate::model::{Example, ModelConfig, STModel};
use crate::optim::{train_loop, LrSchedule, NoamSchedule, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Intra,
    Multi,
    Cross,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Intra => "intra",
            ScenarioKind::Multi => "multi",
            ScenarioKind::Cross => "cross",
        }
    }
}

/// One evaluation scenario. Each entry of `pools` is a list of domains whose
/// training splits form one retrieval pool variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub train_domains: Vec<String>,
    pub pools: Vec<Vec<String>>,
    pub test_domain: String,
}

impl ScenarioSpec {
    pub fn intra(domain: &str) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Intra,
            train_domains: vec![domain.into()],
            pools: vec![vec![domain.into()]],
            test_domain: domain.into(),
        }
    }

    /// Trained on `d1` only and tested on `d2`, with an in-domain pool and
    /// a training-data pool.
    pub fn cross(d1: &str, d2: &str) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Cross,
            train_domains: vec![d1.into()],
            pools: vec![vec![d2.into()], vec![d1.into()]],
            test_domain: d2.into(),
        }
    }

    /// Trained on `d1 + d2`, tested on `d2`, with a single-domain pool and the
    /// combined pool.
    pub fn multi(d1: &str, d2: &str) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Multi,
            train_domains: vec![d1.into(), d2.into()],
            pools: vec![vec![d2.into()], vec![d1.into(), d2.into()]],
            test_domain: d2.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| {
            Err(Error::Config(format!(
                "{} scenario: {m}",
                self.kind.as_str()
            )))
        };
        if self.train_domains.is_empty()
            || self.pools.is_empty()
            || self.pools.iter().any(Vec::is_empty)
        {
            return fail("train domains and every pool need at least one domain");
        }
        let train: BTreeSet<&str> = self.train_domains.iter().map(String::as_str).collect();
        match self.kind {
            ScenarioKind::Intra => {
                let ok = train.len() == 1
                    && train.contains(self.test_domain.as_str())
                    && self
                        .pools
                        .iter()
                        .all(|p| p.iter().all(|d| *d == self.test_domain));
                if !ok {
                    return fail("train, pool and test domain must coincide");
                }
            }
            ScenarioKind::Multi => {
                if train.len() < 2 || !train.contains(self.test_domain.as_str()) {
                    return fail("needs two or more training domains including the test domain");
                }
            }
            ScenarioKind::Cross => {
                if train.contains(self.test_domain.as_str()) {
                    return fail("the test domain must be unseen in training");
                }
            }
        }
        Ok(())
    }
}

/// Generic-model training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub accum: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 8,
            accum: 1,
            epochs: 14,
            schedule: LrSchedule::Noam(NoamSchedule {
                lr_init: 3e-4,
                warmup_steps: 250,
                lr_max: 3e-3,
            }),
        }
    }
}

/// Adapt on the single least-similar pool pair and decode after each epoch
/// count. Runs on the first intra-domain scenario and its first pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub epochs: Vec<usize>,
    /// Defaults to the learning rate selected by the intra-domain grid search.
    pub lr: Option<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            epochs: vec![1, 3, 5],
            lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub domains: Vec<DomainSpec>,
    /// Utterances generated per domain, keyed by domain name.
    pub corpus_sizes: BTreeMap<String, usize>,
    pub scenarios: Vec<ScenarioSpec>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub grid: Grid,
    pub key_kind: KeyKind,
    /// Caps on validation and test segments per scenario.
    pub valid_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub ablation: Option<AblationSpec>,
}

impl Default for ExperimentSpec {
    /// Domains A and B, intra-domain on A and cross-domain A to B.
    fn default() -> Self {
        ExperimentSpec {
            domains: vec![DomainSpec::preset_a(), DomainSpec::preset_b()],
            corpus_sizes: BTreeMap::from([("A".into(), 2500), ("B".into(), 1500)]),
            scenarios: vec![ScenarioSpec::intra("A"), ScenarioSpec::cross("A", "B")],
            seeds: vec![1, 2, 3],
            model: ModelConfig {
                feature_dim: 32,
                d_model: 64,
                ff_dim: 128,
                cnn_channels: 16,
                dropout_p: 0.05,
                ..ModelConfig::default()
            },
            train: TrainSettings::default(),
            grid: Grid::default(),
            key_kind: KeyKind::Encoder,
            valid_limit: Some(30),
            test_limit: Some(100),
            ablation: Some(AblationSpec::default()),
        }
    }
}

impl ExperimentSpec {
    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Config(
                "an experiment needs seeds and scenarios".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("domain {:?} defined twice", d.name)));
            }
            if d.feature_dim != self.model.feature_dim {
                return Err(Error::Config(format!(
                    "domain {} has feature_dim {} but the model expects {}",
                    d.name, d.feature_dim, self.model.feature_dim
                )));
            }
            if self.corpus_sizes.get(&d.name).copied().unwrap_or(0) == 0 {
                return Err(Error::Config(format!(
                    "no corpus size for domain {:?}",
                    d.name
                )));
            }
        }
        for s in &self.scenarios {
            s.validate()?;
            for d in s
                .train_domains
                .iter()
                .chain(s.pools.iter().flatten())
                .chain([&s.test_domain])
            {
                self.domain(d)?;
            }
        }
        if let Some(a) = &self.ablation {
            if a.epochs.is_empty() {
                return Err(Error::Config(
                    "ablation needs at least one epoch count".into(),
                ));
            }
        }
        self.model.validate()?;
        self.grid.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: ScenarioKind,
    pub train: String,
    /// Domains of the retrieval pool, joined with `+`.
    pub pool: String,
    pub test: String,
    pub seed: u64,
    pub static_bleu: f64,
    pub adapted_bleu: f64,
    pub delta: f64,
    pub best_config: Option<AdaptationConfig>,
    /// Set when the run failed; the scores are then zero.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub static_bleu: f64,
    pub bleu: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: ScenarioKind,
    pub pool: String,
    pub mean_static: f64,
    pub mean_adapted: f64,
    pub mean_delta: f64,
    pub positive_seeds: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub ablation: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

fn join(domains: &[String]) -> String {
    domains.join("+")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per (scenario, pool) means over the successful seeds.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(ScenarioKind, &str), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.failure.is_none()) {
        groups
            .entry((r.scenario, r.pool.as_str()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, pool), rs)| SummaryRow {
            scenario,
            pool: pool.to_string(),
            mean_static: mean(rs.iter().map(|r| r.static_bleu)),
            mean_adapted: mean(rs.iter().map(|r| r.adapted_bleu)),
            mean_delta: mean(rs.iter().map(|r| r.delta)),
            positive_seeds: rs.iter().filter(|r| r.delta > 0.0).count(),
            seeds: rs.len(),
        })
        .collect()
}

/// Generated corpora of one seed.
pub struct SeedData {
    pub seed: u64,
    pub corpora: BTreeMap<String, Vec<Utterance>>,
}

impl SeedData {
    pub fn generate(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let mut corpora = BTreeMap::new();
        for d in &spec.domains {
            let size = spec.corpus_sizes[&d.name];
            corpora.insert(d.name.clone(), generate_corpus(d, size, seed)?);
        }
        Ok(SeedData { seed, corpora })
    }

    /// Utterances of `split` across `domains`, in domain order.
    pub fn split<'a>(&'a self, domains: &[String], split: Split) -> Vec<&'a Utterance> {
        domains
            .iter()
            .filter_map(|d| self.corpora.get(d))
            .flatten()
            .filter(|u| u.split == split)
            .collect()
    }
}

/// Trains a generic model on the training splits of `domains`.
pub fn train_generic(
    spec: &ExperimentSpec,
    data: &SeedData,
    domains: &[String],
) -> Result<STModel> {
    let train = data.split(domains, Split::Train);
    if train.is_empty() {
        return Err(Error::Empty(format!("training split of {}", join(domains))));
    }
    let mut model = STModel::new(spec.model.clone(), data.seed)?;
    let targets: Vec<Vec<usize>> = train
        .iter()
        .map(|u| model.vocab().target_ids(&u.target))
        .collect();
    let examples: Vec<Example> = train
        .iter()
        .zip(&targets)
        .map(|(u, t)| Example {
            features: &u.features,
            target: t,
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: spec.train.batch_size,
        accum: spec.train.accum,
        epochs: spec.train.epochs,
        seed: data.seed,
        shuffle: true,
    };
    train_loop(
        &mut model,
        &examples,
        Optimizer::adam(),
        spec.train.schedule,
        cfg,
    )?;
    model.set_train(false);
    Ok(model)
}

pub fn build_pool(
    data: &SeedData,
    domains: &[String],
    kind: KeyKind,
    model: &STModel,
) -> Result<Pool> {
    let items = data
        .split(domains, Split::Train)
        .into_iter()
        .map(|u| PoolItem {
            id: u.id.clone(),
            domain: u.domain.clone(),
            translation: u.target.clone(),
            features: std::sync::Arc::new(u.features.clone()),
        })
        .collect();
    Pool::build(items, kind, Some(model))
}

pub fn eval_items<'a>(utts: &[&'a Utterance]) -> Vec<EvalItem<'a>> {
    utts.iter()
        .map(|u| EvalItem {
            id: &u.id,
            features: &u.features,
            reference: &u.target,
            exclude_id: None,
        })
        .collect()
}

fn limited(mut v: Vec<&Utterance>, limit: Option<usize>) -> Vec<&Utterance> {
    if let Some(l) = limit {
        v.truncate(l);
    }
    v
}

pub fn static_bleu(model: &STModel, items: &[EvalItem<'_>]) -> Result<(f64, Vec<String>)> {
    let hyps = items
        .iter()
        .map(|i| model.translate(i.features))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = items.iter().map(|i| i.reference).collect();
    Ok((bleu_corpus(&hyps, &refs)?, hyps))
}

/// Grid-searches on `valid` and scores the selected configuration on `test`.
pub fn adapted_bleu(
    model: &STModel,
    pool: &Pool,
    valid: &[EvalItem<'_>],
    test: &[EvalItem<'_>],
    grid: &Grid,
) -> Result<(AdaptationConfig, f64)> {
    let best = if grid.configs().len() == 1 {
        grid.configs()[0]
    } else {
        grid_search(model, pool, valid, grid)?.best
    };
    let hyps = grid_translations(model, pool, test, &Grid::single(best))?.remove(0);
    let refs: Vec<&str> = test.iter().map(|i| i.reference).collect();
    Ok((best, bleu_corpus(&hyps, &refs)?))
}

fn model_key(domains: &[String]) -> Vec<String> {
    let mut key = domains.to_vec();
    key.sort();
    key
}

struct SeedRun<'s> {
    spec: &'s ExperimentSpec,
    data: SeedData,
    models: BTreeMap<Vec<String>, STModel>,
}

impl SeedRun<'_> {
    fn model(&mut self, domains: &[String]) -> Result<&STModel> {
        let key = model_key(domains);
        if !self.models.contains_key(&key) {
            log::info!(
                "seed {}: training generic model on {}",
                self.data.seed,
                join(domains)
            );
            let m = train_generic(self.spec, &self.data, domains)?;
            self.models.insert(key.clone(), m);
        }
        Ok(&self.models[&key])
    }

    fn scenario(&mut self, sc: &ScenarioSpec, report: &mut Report, ablate: bool) {
        let seed = self.data.seed;
        let row = |pool: &[String]| ReportRow {
            scenario: sc.kind,
            train: join(&sc.train_domains),
            pool: join(pool),
            test: sc.test_domain.clone(),
            seed,
            static_bleu: 0.0,
            adapted_bleu: 0.0,
            delta: 0.0,
            best_config: None,
            failure: None,
        };
        let spec = self.spec;
        let test_domain = [sc.test_domain.clone()];
        if let Err(e) = self.model(&sc.train_domains) {
            for p in &sc.pools {
                report.rows.push(ReportRow {
                    failure: Some(e.to_string()),
                    ..row(p)
                });
            }
            return;
        }
        let model = &self.models[&model_key(&sc.train_domains)];
        let valid_utts = limited(
            self.data.split(&test_domain, Split::Valid),
            spec.valid_limit,
        );
        let test_utts = limited(self.data.split(&test_domain, Split::Test), spec.test_limit);
        let valid = eval_items(&valid_utts);
        let test = eval_items(&test_utts);
        let static_score = match static_bleu(model, &test) {
            Ok((b, _)) => b,
            Err(e) => {
                for p in &sc.pools {
                    report.rows.push(ReportRow {
                        failure: Some(e.to_string()),
                        ..row(p)
                    });
                }
                return;
            }
        };
        for (pi, pool_domains) in sc.pools.iter().enumerate() {
            log::info!(
                "seed {seed}: {} scenario, pool {}",
                sc.kind.as_str(),
                join(pool_domains)
            );
            let result =
                build_pool(&self.data, pool_domains, spec.key_kind, model).and_then(|pool| {
                    adapted_bleu(model, &pool, &valid, &test, &spec.grid).map(|r| (pool, r))
                });
            match result {
                Ok((pool, (best, adapted))) => {
                    report.rows.push(ReportRow {
                        static_bleu: static_score,
                        adapted_bleu: adapted,
                        delta: adapted - static_score,
                        best_config: Some(best),
                        ..row(pool_domains)
                    });
                    if pi == 0 && ablate {
                        if let Some(ab) = &spec.ablation {
                            let lr = ab.lr.unwrap_or(best.lr);
                            match least_similar_rows(
                                model,
                                &pool,
                                &test,
                                static_score,
                                lr,
                                best,
                                ab,
                                seed,
                            ) {
                                Ok(rows) => report.ablation.extend(rows),
                                Err(e) => log::warn!("seed {seed}: ablation failed: {e}"),
                            }
                        }
                    }
                }
                Err(e) => report.rows.push(ReportRow {
                    failure: Some(e.to_string()),
                    ..row(pool_domains)
                }),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn least_similar_rows(
    model: &STModel,
    pool: &Pool,
    test: &[EvalItem<'_>],
    static_score: f64,
    lr: f64,
    best: AdaptationConfig,
    ab: &AblationSpec,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut epochs = ab.epochs.clone();
    epochs.sort_unstable();
    epochs.dedup();
    let mut per_epoch: Vec<Vec<String>> = vec![Vec::with_capacity(test.len()); epochs.len()];
    for item in test {
        let outs = least_similar_translations(model, pool, *item, lr, best.optimizer, &epochs)?;
        for (slot, o) in per_epoch.iter_mut().zip(outs) {
            slot.push(o);
        }
    }
    let refs: Vec<&str> = test.iter().map(|i| i.reference).collect();
    epochs
        .iter()
        .zip(&per_epoch)
        .map(|(&e, hyps)| {
            let b = bleu_corpus(hyps, &refs)?;
            Ok(AblationRow {
                seed,
                epochs: e,
                lr,
                static_bleu: static_score,
                bleu: b,
                delta: b - static_score,
            })
        })
        .collect()
}

/// Runs every scenario for every seed. Failures are recorded in the
/// affected rows and do not stop the remaining runs.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let mut report = Report::default();
    for &seed in &spec.seeds {
        let data = match SeedData::generate(spec, seed) {
            Ok(d) => d,
            Err(e) => {
                for sc in &spec.scenarios {
                    for p in &sc.pools {
                        report.rows.push(ReportRow {
                            scenario: sc.kind,
                            train: join(&sc.train_domains),
                            pool: join(p),
                            test: sc.test_domain.clone(),
                            seed,
                            static_bleu: 0.0,
                            adapted_bleu: 0.0,
                            delta: 0.0,
                            best_config: None,
                            failure: Some(e.to_string()),
                        });
                    }
                }
                continue;
            }
        };
        let mut run = SeedRun {
            spec,
            data,
            models: BTreeMap::new(),
        };
        let first_intra = spec
            .scenarios
            .iter()
            .position(|s| s.kind == ScenarioKind::Intra);
        for (i, sc) in spec.scenarios.iter().enumerate() {
            run.scenario(sc, &mut report, Some(i) == first_intra);
        }
    }
    report.rows.sort_by_key(|r| (r.scenario, r.seed));
    report.summary = summarize(&report.rows);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Invalid(format!("unknown report format {other:?}"))),
        }
    }
}

fn config_cell(c: &Option<AdaptationConfig>) -> String {
    match c {
        Some(c) => format!("lr={:e} n={} e={}", c.lr, c.n, c.epochs),
        None => "-".into(),
    }
}

/// Renders `report` as an aligned text table or pretty JSON.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Empty("report".into()));
    }
    if format == ReportFormat::Json {
        return Ok(serde_json::to_string_pretty(report)?);
    }
    let header = [
        "scenario", "train", "pool", "test", "seed", "static", "adapted", "delta", "config",
        "status",
    ];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in &report.rows {
        table.push(vec![
            r.scenario.as_str().into(),
            r.train.clone(),
            r.pool.clone(),
            r.test.clone(),
            r.seed.to_string(),
            format!("{:.2}", r.static_bleu),
            format!("{:.2}", r.adapted_bleu),
            format!("{:+.2}", r.delta),
            config_cell(&r.best_config),
            r.failure
                .as_deref()
                .map_or("ok".into(), |f| format!("FAILED: {f}")),
        ]);
    }
    let mut out = aligned(&table);
    if !report.summary.is_empty() {
        let mut t = vec![[
            "scenario",
            "pool",
            "mean static",
            "mean adapted",
            "mean delta",
            "positive",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
        for s in &report.summary {
            t.push(vec![
                s.scenario.as_str().into(),
                s.pool.clone(),
                format!("{:.2}", s.mean_static),
                format!("{:.2}", s.mean_adapted),
                format!("{:+.2}", s.mean_delta),
                format!("{}/{}", s.positive_seeds, s.seeds),
            ]);
        }
        out.push('\n');
        out.push_str(&aligned(&t));
    }
    if !report.ablation.is_empty() {
        let mut t = vec![["seed", "epochs", "lr", "static", "least-similar", "delta"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()];
        for a in &report.ablation {
            t.push(vec![
                a.seed.to_string(),
                a.epochs.to_string(),
                format!("{:e}", a.lr),
                format!("{:.2}", a.static_bleu),
                format!("{:.2}", a.bleu),
                format!("{:+.2}", a.delta),
            ]);
        }
        out.push('\n');
        out.push_str(&aligned(&t));
    }
    Ok(out)
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
