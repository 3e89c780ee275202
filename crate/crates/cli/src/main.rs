use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ima_core::corpus::{
    generate_corpus, read_features, read_manifest, write_features, write_manifest, DomainSpec,
    ManifestRow, Split,
};
use ima_core::datapool::{KeyKind, Pool};
use ima_core::engine::{
    grid_search, ima_translate, AdaptationConfig, EvalItem, Grid, OptimizerKind, Request,
};
use ima_core::harness::experiment::TrainSettings;
use ima_core::harness::{render_report, run_experiment, ExperimentSpec, ReportFormat};
use ima_core::model::{load_checkpoint, save_checkpoint, CharVocab, Example, ModelConfig, STModel};
use ima_core::optim::{train_loop, Optimizer, TrainConfig};
use ima_core::tensor::Tensor;
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "ima",
    version,
    about = "Instance-based on-the-fly adaptation for speech translation"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora, feature files and a manifest.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generic model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval pool operations.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Translate one feature file with per-request adaptation.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Request id; seeds adaptation dropout and is excluded from retrieval.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Grid-search adaptation hyper-parameters on a manifest split.
    Grid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Grid JSON; the default grid is used when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: Split,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the experiment scenarios and write a report.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Key the manifest's pairs and save the pool.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        kind: KeyKind,
        /// Generic model; required for encoder keys.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        domain: Option<String>,
    },
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
}

impl AdaptArgs {
    fn config(&self) -> AdaptationConfig {
        let d = AdaptationConfig::default();
        AdaptationConfig {
            lr: self.lr.unwrap_or(d.lr),
            n: self.n.unwrap_or(d.n),
            epochs: self.epochs.unwrap_or(d.epochs),
            tau: self.tau.unwrap_or(d.tau),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
        }
    }
}

/// A domain given either as a preset name or as a full description.
#[derive(Deserialize)]
#[serde(untagged)]
enum DomainSource {
    Preset { preset: String },
    Custom { spec: Box<DomainSpec> },
}

#[derive(Deserialize)]
struct GenDomain {
    #[serde(flatten)]
    source: DomainSource,
    size: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenSpec {
    seed: u64,
    domains: Vec<GenDomain>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainJob {
    model: ModelConfig,
    train: TrainSettings,
    seed: u64,
    /// Restrict training to these domains.
    domains: Option<Vec<String>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn select(rows: Vec<ManifestRow>, split: Split, domains: Option<&[String]>) -> Vec<ManifestRow> {
    rows.into_iter()
        .filter(|r| r.split == split)
        .filter(|r| domains.is_none_or(|d| d.contains(&r.domain)))
        .collect()
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let spec: GenSpec = read_json(spec)?;
    let mut rows = Vec::new();
    let mut counts = serde_json::Map::new();
    let mut seen = BTreeSet::new();
    for d in &spec.domains {
        let domain = match &d.source {
            DomainSource::Preset { preset } => DomainSpec::preset(preset)?,
            DomainSource::Custom { spec } => (**spec).clone(),
        };
        if !seen.insert(domain.name.clone()) {
            bail!("domain {} listed twice", domain.name);
        }
        let dir = out.join(&domain.name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let utts = generate_corpus(&domain, d.size, spec.seed)?;
        for u in &utts {
            let path = dir.join(format!("{}.fbnk", u.id));
            write_features(&path, &u.features)?;
            rows.push(ManifestRow {
                id: u.id.clone(),
                features: path,
                target: u.target.clone(),
                domain: u.domain.clone(),
                split: u.split,
            });
        }
        counts.insert(domain.name.clone(), json!(utts.len()));
    }
    let manifest = out.join("manifest.tsv");
    write_manifest(&manifest, &rows)?;
    print(&json!({ "manifest": manifest, "utterances": counts }))
}

fn train(manifest: &Path, config: &Path, out: &Path) -> Result<()> {
    let job: TrainJob = read_json(config)?;
    let rows = select(
        read_manifest(manifest)?,
        Split::Train,
        job.domains.as_deref(),
    );
    if rows.is_empty() {
        bail!("no training rows in {}", manifest.display());
    }
    let features = rows
        .iter()
        .map(|r| read_features(&r.features))
        .collect::<Result<Vec<_>, _>>()?;
    let mut symbols: BTreeSet<char> = job.model.symbols.chars().collect();
    symbols.extend(CharVocab::symbols_of(rows.iter().map(|r| r.target.as_str())).chars());
    let symbols: String = symbols.into_iter().collect();
    let mut model = STModel::new(job.model.clone().with_symbols(&symbols), job.seed)?;
    let targets: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| model.vocab().target_ids(&r.target))
        .collect();
    let data: Vec<Example> = features
        .iter()
        .zip(&targets)
        .map(|(f, t)| Example {
            features: f,
            target: t,
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: job.train.batch_size,
        accum: job.train.accum,
        epochs: job.train.epochs,
        seed: job.seed,
        shuffle: true,
    };
    let report = train_loop(
        &mut model,
        &data,
        Optimizer::adam(),
        job.train.schedule,
        cfg,
    )?;
    model.set_train(false);
    save_checkpoint(&model, out)?;
    print(&json!({
        "checkpoint": out,
        "examples": data.len(),
        "parameters": model.num_params(),
        "optimizer_steps": report.steps,
        "epoch_losses": report.epoch_losses,
    }))
}

fn pool_build(
    manifest: &Path,
    kind: KeyKind,
    model: Option<&Path>,
    out: &Path,
    split: Split,
    domain: Option<String>,
) -> Result<()> {
    let domains = domain.map(|d| vec![d]);
    let rows = select(read_manifest(manifest)?, split, domains.as_deref());
    let model = model.map(load_checkpoint).transpose()?;
    if kind == KeyKind::Encoder && model.is_none() {
        bail!("--kind encoder requires --model");
    }
    let pool = Pool::from_manifest(&rows, kind, model.as_ref())?;
    let desc = pool.save(out, manifest)?;
    print(&json!({
        "pool": out,
        "entries": pool.len(),
        "dim": pool.dim(),
        "key_kind": desc.key_kind,
        "sidecar": desc.sidecar,
    }))
}

fn translate(
    model: &Path,
    pool: &Path,
    features: &Path,
    id: Option<String>,
    cfg: AdaptationConfig,
) -> Result<()> {
    let model = load_checkpoint(model)?;
    let pool = Pool::load(pool)?;
    let feats: Tensor = read_features(features)?;
    let id = id.unwrap_or_else(|| features.display().to_string());
    let request = Request::new(&id, &feats).excluding(&id);
    let outcome = ima_translate(&model, &pool, request, &cfg)?;
    print(&json!({
        "translation": outcome.translation,
        "adapted": outcome.adapted,
        "retrieved": outcome.retrieved.iter().map(|h| json!({ "id": h.id, "similarity": h.score })).collect::<Vec<_>>(),
        "wall_time_ms": outcome.wall_time_ms,
        "config": cfg,
    }))
}

fn grid(
    model: &Path,
    pool: &Path,
    manifest: &Path,
    grid: Option<&Path>,
    split: Split,
    domain: Option<String>,
    limit: Option<usize>,
) -> Result<()> {
    let model = load_checkpoint(model)?;
    let pool = Pool::load(pool)?;
    let grid: Grid = grid.map(read_json).transpose()?.unwrap_or_default();
    let domains = domain.map(|d| vec![d]);
    let mut rows = select(read_manifest(manifest)?, split, domains.as_deref());
    if let Some(l) = limit {
        rows.truncate(l);
    }
    let features = rows
        .iter()
        .map(|r| read_features(&r.features))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<EvalItem> = rows
        .iter()
        .zip(&features)
        .map(|(r, f)| EvalItem {
            id: &r.id,
            features: f,
            reference: &r.target,
            exclude_id: Some(&r.id),
        })
        .collect();
    let result = grid_search(&model, &pool, &items, &grid)?;
    print(&serde_json::to_value(&result)?)
}

fn experiment(spec: &Path, report: &Path, format: ReportFormat) -> Result<()> {
    let spec: ExperimentSpec = read_json(spec)?;
    let result = run_experiment(&spec)?;
    let doc = render_report(&result, format)?;
    fs::write(report, &doc).with_context(|| format!("writing {}", report.display()))?;
    let failed = result.rows.iter().filter(|r| r.failure.is_some()).count();
    print(
        &json!({ "report": report, "rows": result.rows.len(), "failed_rows": failed, "summary": result.summary }),
    )?;
    if failed > 0 {
        bail!("{failed} report rows failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train {
            manifest,
            config,
            out,
        } => train(&manifest, &config, &out),
        Command::Pool {
            command:
                PoolCommand::Build {
                    manifest,
                    kind,
                    model,
                    out,
                    split,
                    domain,
                },
        } => pool_build(&manifest, kind, model.as_deref(), &out, split, domain),
        Command::Translate {
            model,
            pool,
            features,
            id,
            adapt,
        } => translate(&model, &pool, &features, id, adapt.config()),
        Command::Grid {
            model,
            pool,
            manifest,
            grid: g,
            split,
            domain,
            limit,
        } => grid(&model, &pool, &manifest, g.as_deref(), split, domain, limit),
        Command::Experiment {
            spec,
            report,
            format,
        } => experiment(&spec, &report, format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
