use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use omniseq::evaluation::{config_hash, evaluate, ComparisonTable, EvalConfig, ExclusionPolicy};
use omniseq::experiment::{
    load_dataset, read_json, run_experiment, write_json, ExperimentConfig, ExperimentManifest, ModelShape, MANIFEST_FILE,
};
use omniseq::model::{Checkpoint, Variant};
use omniseq::pipeline::{load_raw, read_ndjson, run_pipeline, split_micro_batches, PipelineConfig, PipelineStats};
use omniseq::synthgen::{generate, write_corpus, GenConfig};
use omniseq::training::{train, write_metrics_log, SplitMode, TrainConfig};
use omniseq::{Error, Result};

#[derive(Parser)]
#[command(name = "omniseq", version, about = "Hybrid online/in-store sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Stream raw events through the windowed feature pipeline.
    Ingest(IngestArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on the test targets.
    Evaluate(EvaluateArgs),
    /// Run generation, ingestion, training and evaluation for every variant.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    intents: Option<usize>,
    #[arg(long)]
    items_per_intent: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    stay_prob: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Online events, one JSON record per line.
    #[arg(long, requires = "store", conflicts_with = "data")]
    online: Option<PathBuf>,
    /// In-store transactions, one JSON record per line.
    #[arg(long, requires = "online")]
    store: Option<PathBuf>,
    /// Directory holding `online.ndjson` and `store.ndjson`.
    #[arg(long, required_unless_present = "online")]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24 * 3600)]
    window_secs: i64,
    #[arg(long, default_value_t = 12 * 3600)]
    slide_secs: i64,
    /// Span of one micro-batch; defaults to the slide.
    #[arg(long)]
    micro_batch_secs: Option<i64>,
    #[arg(long, default_value_t = 90)]
    max_seq_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value = "clean")]
    mode: SplitMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    negatives: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Catalog size when the data directory carries no generator config.
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics; defaults to `<out>.metrics.ndjson`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "history")]
    exclude: ExclusionPolicy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with_all = ["manifest", "smoke"])]
    config: Option<PathBuf>,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Small built-in configuration instead of the desk-scale one.
    #[arg(long)]
    smoke: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct IngestSummary {
    config_hash: String,
    stats: PipelineStats,
    cached_users: usize,
}

#[derive(Serialize)]
struct CheckpointReport {
    path: PathBuf,
    variant: Variant,
    hit10: f64,
    ndcg10: f64,
    users: usize,
    skipped_users: usize,
}

#[derive(Serialize)]
struct EvaluationReport {
    config_hash: String,
    eval: EvalConfig,
    checkpoints: Vec<CheckpointReport>,
    table: ComparisonTable,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => GenConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = args.users {
        cfg.users = v;
    }
    if let Some(v) = args.items {
        cfg.catalog_size = v;
    }
    if let Some(v) = args.intents {
        cfg.intents = v;
    }
    if let Some(v) = args.items_per_intent {
        cfg.items_per_intent = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.stay_prob {
        cfg.stay_prob = v;
    }
    if args.items.is_some() && args.items_per_intent.is_none() {
        cfg.items_per_intent = cfg.catalog_size / cfg.intents.max(1);
    }
    let corpus = generate(&cfg)?;
    write_corpus(&corpus, &args.out)?;
    println!(
        "generated {} online events and {} in-store transactions for {} users",
        corpus.online.len(),
        corpus.store.len(),
        cfg.users
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(args.window_secs, args.slide_secs)?;
    cfg.max_seq_len = args.max_seq_len;
    let batch_secs = args.micro_batch_secs.unwrap_or(args.slide_secs);
    if batch_secs <= 0 {
        return Err(Error::Config("micro-batch span must be positive".into()));
    }
    let (online, store) = match (&args.online, &args.store, &args.data) {
        (Some(online), Some(store), _) => (read_ndjson(online)?, read_ndjson(store)?),
        (_, _, Some(dir)) => load_raw(dir)?,
        _ => return Err(Error::Config("give --online and --store, or --data".into())),
    };
    let (online_batches, store_batches): (Vec<_>, Vec<_>) =
        split_micro_batches(&online, &store, batch_secs).into_iter().unzip();
    let run = run_pipeline(online_batches, store_batches, &cfg, &args.out)?;
    let summary = IngestSummary {
        config_hash: config_hash(&(&cfg, batch_secs)),
        stats: run.stats,
        cached_users: run.cache.len(),
    };
    write_json(&args.out.join("ingest.json"), &summary)?;
    println!(
        "{} flushes, {} records, {} duplicates dropped",
        run.stats.flushes, run.stats.records, run.stats.duplicates_dropped
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(args.mode, args.seed);
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch_size;
    cfg.lr = args.lr;
    cfg.negatives_per_step = args.negatives;
    let (dataset, catalog) = load_dataset(&args.data, cfg.max_seq_len, args.items)?;
    let shape = ModelShape {
        d: args.d,
        blocks: args.blocks,
        heads: 1,
    };
    let outcome = train(&dataset, args.variant, shape.config(catalog, args.variant), &cfg)?;
    outcome.checkpoint.save(&args.out)?;
    let metrics = args.metrics.unwrap_or_else(|| with_suffix(&args.out, ".metrics.ndjson"));
    write_metrics_log(&metrics, &outcome.log)?;
    println!(
        "trained {} for {} epochs, kept epoch {} ({} users skipped)",
        args.variant,
        outcome.log.len(),
        outcome.selected_epoch,
        outcome.skipped_users
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let eval = EvalConfig {
        policy: args.exclude,
        ..EvalConfig::new(args.seed)
    };
    let mut checkpoints = Vec::with_capacity(args.ckpt.len());
    for path in &args.ckpt {
        let ckpt = Checkpoint::load(path)?;
        let (dataset, _) = load_dataset(
            &args.data,
            ckpt.params.config.max_seq_len,
            Some(ckpt.params.config.catalog_size),
        )?;
        let summary = evaluate(&ckpt, &dataset, &eval)?;
        checkpoints.push(CheckpointReport {
            path: path.clone(),
            variant: ckpt.variant,
            hit10: summary.hit10,
            ndcg10: summary.ndcg10,
            users: summary.users,
            skipped_users: summary.skipped,
        });
    }
    let table = ComparisonTable::new(&checkpoints.iter().map(|c| (c.variant, c.hit10, c.ndcg10)).collect::<Vec<_>>());
    print!("{}", table.render());
    let report = EvaluationReport {
        config_hash: config_hash(&eval),
        eval,
        checkpoints,
        table,
    };
    write_json(&args.out, &report)
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let cfg = if let Some(path) = &args.manifest {
        ExperimentManifest::load(path)?.config
    } else if let Some(path) = &args.config {
        read_json(path)?
    } else if args.smoke {
        ExperimentConfig::smoke(args.seed)
    } else {
        ExperimentConfig::desk(args.seed)
    };
    let report = run_experiment(&cfg, &args.out)?;
    print!("{}", report.table.render());
    println!("manifest: {}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).map_err(|e| e.in_stage("gen")),
        Command::Ingest(a) => cmd_ingest(a).map_err(|e| e.in_stage("ingest")),
        Command::Train(a) => cmd_train(a).map_err(|e| e.in_stage("train")),
        Command::Evaluate(a) => cmd_evaluate(a).map_err(|e| e.in_stage("evaluate")),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
