//! End-to-end experiment: generate, ingest, train every variant, evaluate,
//! and compare against the online-only baseline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::HybridSequence;
use crate::error::{Error, Result};
use crate::evaluation::{config_hash, evaluate, ComparisonTable, EvalConfig, ExclusionPolicy};
use crate::model::{ModelConfig, Variant};
use crate::pipeline::{run_pipeline, sequences_from_store, split_micro_batches, PipelineConfig};
use crate::synthgen::{generate, write_corpus, GenConfig};
use crate::training::{train, write_metrics_log, SplitMode, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

/// Width, depth and heads of the recommender; catalog size and encoder come
/// from the data and the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl ModelShape {
    pub fn config(&self, catalog_size: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            heads: self.heads,
            ..ModelConfig::new(catalog_size, variant.encoder()).with_dim(self.d)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub pipeline: PipelineConfig,
    /// Span of one ingestion micro-batch.
    pub micro_batch_secs: i64,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub variants: Vec<Variant>,
}

impl ExperimentConfig {
    /// Desk-scale configuration with every seed set to `seed`.
    pub fn desk(seed: u64) -> Self {
        let mut train = TrainConfig::new(SplitMode::Clean, seed);
        train.epochs = 5;
        train.batch_size = 1;
        ExperimentConfig {
            gen: GenConfig {
                seed,
                ..GenConfig::default()
            },
            pipeline: PipelineConfig::new(24 * 3600, 12 * 3600).expect("valid window"),
            micro_batch_secs: 12 * 3600,
            model: ModelShape {
                d: 32,
                blocks: 2,
                heads: 1,
            },
            train,
            eval: EvalConfig::new(seed),
            variants: Variant::ALL.to_vec(),
        }
    }

    /// Small configuration for smoke runs.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::desk(seed);
        cfg.gen.users = 200;
        cfg.gen.catalog_size = 500;
        cfg.gen.intents = 10;
        cfg.gen.items_per_intent = 50;
        cfg.model.d = 16;
        cfg.train.epochs = 3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.pipeline.window.validate()?;
        self.train.validate()?;
        if self.micro_batch_secs <= 0 {
            return Err(Error::Config("micro_batch_secs must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants to train".into()));
        }
        self.model.config(self.gen.catalog_size, Variant::AttnEnc).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigHashes {
    pub gen: String,
    pub pipeline: String,
    pub model: String,
    pub train: String,
    pub eval: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub gen: u64,
    pub train: u64,
    pub eval: u64,
}

/// Everything needed to reproduce a run, with paths relative to the output
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub config_hashes: ConfigHashes,
    pub seeds: Seeds,
    pub artifacts: Vec<PathBuf>,
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig, artifacts: Vec<PathBuf>) -> Self {
        ExperimentManifest {
            tool_version: TOOL_VERSION.into(),
            config_hashes: ConfigHashes {
                gen: config_hash(&config.gen),
                pipeline: config_hash(&(&config.pipeline, config.micro_batch_secs)),
                model: config_hash(&config.model),
                train: config_hash(&config.train),
                eval: config_hash(&config.eval),
            },
            seeds: Seeds {
                gen: config.gen.seed,
                train: config.train.seed,
                eval: config.eval.seed,
            },
            config,
            artifacts,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub hit10: f64,
    pub ndcg10: f64,
    pub users: usize,
    pub skipped_users: usize,
    pub selected_epoch: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub exclusion_policy: ExclusionPolicy,
    pub results: Vec<VariantResult>,
    pub table: ComparisonTable,
}

impl ExperimentReport {
    pub fn result(&self, variant: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.into(),
        line: source.line(),
        source,
    })
}

/// Trains and evaluates every configured variant on a prepared dataset,
/// writing checkpoints and metric logs under `out` when given.
pub fn compare_variants(
    dataset: &[HybridSequence],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<VariantResult>> {
    let mut results = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let model = cfg.model.config(cfg.gen.catalog_size, variant);
        let outcome = train(dataset, variant, model, &cfg.train).map_err(|e| e.in_stage("train"))?;
        if let Some(out) = out {
            outcome
                .checkpoint
                .save(&out.join(format!("{variant}.ckpt")))
                .map_err(|e| e.in_stage("train"))?;
            write_metrics_log(&out.join(format!("{variant}.metrics.ndjson")), &outcome.log)
                .map_err(|e| e.in_stage("train"))?;
        }
        let summary = evaluate(&outcome.checkpoint, dataset, &cfg.eval).map_err(|e| e.in_stage("evaluate"))?;
        results.push(VariantResult {
            variant,
            hit10: summary.hit10,
            ndcg10: summary.ndcg10,
            users: summary.users,
            skipped_users: summary.skipped,
            selected_epoch: outcome.selected_epoch,
            final_loss: outcome.log.last().map_or(f64::NAN, |l| l.loss),
        });
    }
    Ok(results)
}

/// Runs every stage into `out` and writes the manifest and report there.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let data = out.join("data");
    let corpus = generate(&cfg.gen).map_err(|e| e.in_stage("gen"))?;
    write_corpus(&corpus, &data).map_err(|e| e.in_stage("gen"))?;

    let features = out.join("features");
    let batches = split_micro_batches(&corpus.online, &corpus.store, cfg.micro_batch_secs);
    let (online, store): (Vec<_>, Vec<_>) = batches.into_iter().unzip();
    let run = run_pipeline(online, store, &cfg.pipeline, &features).map_err(|e| e.in_stage("ingest"))?;
    let dataset = sequences_from_store(&run.store, cfg.pipeline.max_seq_len).map_err(|e| e.in_stage("ingest"))?;

    let models = out.join("models");
    fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    let results = compare_variants(&dataset, cfg, Some(&models))?;
    let report = ExperimentReport {
        config_hash: config_hash(cfg),
        exclusion_policy: cfg.eval.policy,
        table: ComparisonTable::new(&results.iter().map(|r| (r.variant, r.hit10, r.ndcg10)).collect::<Vec<_>>()),
        results,
    };
    write_json(&out.join(REPORT_FILE), &report)?;

    let mut artifacts = vec![
        PathBuf::from("data"),
        PathBuf::from("features"),
        PathBuf::from(REPORT_FILE),
    ];
    for v in &cfg.variants {
        artifacts.push(PathBuf::from(format!("models/{v}.ckpt")));
        artifacts.push(PathBuf::from(format!("models/{v}.metrics.ndjson")));
    }
    ExperimentManifest::new(cfg.clone(), artifacts).save(&out.join(MANIFEST_FILE))?;
    Ok(report)
}

/// Hybrid sequences from a directory holding either raw event files or an
/// offline feature store, plus the catalog size: `catalog_override`, else the
/// generator config in `ground_truth.json`, else one past the largest id.
pub fn load_dataset(dir: &Path, max_seq_len: usize, catalog_override: Option<usize>) -> Result<(Vec<HybridSequence>, usize)> {
    let dataset = if dir.join(crate::pipeline::ONLINE_FILE).exists() {
        let (online, store) = crate::pipeline::load_raw(dir)?;
        crate::pipeline::batch_sequences(&online, &store, max_seq_len)?
    } else if dir.join(crate::pipeline::HYBRID_SEQ_SCHEMA).exists() {
        sequences_from_store(&crate::pipeline::OfflineStore::open(dir)?, max_seq_len)?
    } else {
        return Err(Error::Data(format!(
            "{} holds neither raw events nor a feature store",
            dir.display()
        )));
    };
    let truth = dir.join(crate::synthgen::GROUND_TRUTH_FILE);
    let catalog = match catalog_override {
        Some(n) => n,
        None if truth.exists() => read_json::<crate::synthgen::GroundTruth>(&truth)?.config.catalog_size,
        None => dataset
            .iter()
            .flat_map(|s| s.interacted_items())
            .max()
            .map_or(0, |i| i.index() + 1),
    };
    if catalog == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok((dataset, catalog))
}
