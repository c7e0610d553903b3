//! Next-item training with sampled cross-entropy.
//!
//! Each user's last online behavior is held out for testing. Remaining
//! positions are supervised only when the next token is an online item, so a
//! set position is never a label, and negatives are drawn from the catalog
//! minus the user's own items.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{HybridSequence, ItemId, Token, TokenKind, UserId};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_params, model_input, EvalConfig, Holdout};
use crate::model::{record_forward, Checkpoint, ModelConfig, ModelParams, Variant};
use crate::numkernel::{adam_step, log_sum_exp, AdamConfig, AdamState, CeTarget, Matrix, Tape};

/// How the second-to-last online behavior is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Kept in training; checkpoints are taken at the final epoch.
    Paper,
    /// Held out as a validation target for checkpoint selection.
    #[default]
    Clean,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(SplitMode::Paper),
            "clean" => Ok(SplitMode::Clean),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestValidation,
    FinalEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub negatives_per_step: usize,
    /// Sampled negatives per validation target.
    pub validation_negatives: usize,
    pub seed: u64,
    pub mode: SplitMode,
    pub checkpoint: CheckpointPolicy,
}

impl TrainConfig {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 512,
            dropout: 0.2,
            epochs: 20,
            max_seq_len: 90,
            negatives_per_step: 100,
            validation_negatives: crate::evaluation::EVAL_NEGATIVES,
            seed,
            mode,
            checkpoint: match mode {
                SplitMode::Paper => CheckpointPolicy::FinalEpoch,
                SplitMode::Clean => CheckpointPolicy::BestValidation,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_seq_len", self.max_seq_len),
            ("negatives_per_step", self.negatives_per_step),
            ("validation_negatives", self.validation_negatives),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.checkpoint == CheckpointPolicy::BestValidation && self.mode == SplitMode::Paper {
            return Err(Error::Config("paper mode has no validation targets to select on".into()));
        }
        Ok(())
    }
}

/// One user's training prefix and held-out targets.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: UserId,
    pub train: HybridSequence,
    pub validation: Option<Holdout>,
    pub test: Holdout,
}

fn prefix(seq: &HybridSequence, end: usize) -> HybridSequence {
    HybridSequence {
        user: seq.user,
        max_seq_len: seq.max_seq_len,
        tokens: seq.tokens[..end].to_vec(),
    }
}

fn online_item(token: &Token) -> ItemId {
    match token.kind {
        TokenKind::Item(item) => item,
        TokenKind::Set(_) => unreachable!("online positions hold items"),
    }
}

/// Splits a sequence into training prefix and holdouts; `None` when the user
/// has fewer than two online behaviors.
pub fn make_examples(seq: &HybridSequence, mode: SplitMode) -> Option<UserSplit> {
    let online: Vec<usize> = (0..seq.len()).filter(|&i| seq.tokens[i].is_online_item()).collect();
    if online.len() < 2 {
        return None;
    }
    let interacted = seq.interacted_items();
    let holdout = |pos: usize| Holdout {
        user: seq.user,
        context: prefix(seq, pos),
        target: online_item(&seq.tokens[pos]),
        interacted: interacted.clone(),
    };
    let last = online[online.len() - 1];
    let second = online[online.len() - 2];
    let (train, validation) = match mode {
        SplitMode::Paper => (prefix(seq, last), None),
        // a validation context needs at least one online behavior so every
        // variant has input
        SplitMode::Clean => {
            let v = (online.len() >= 3).then(|| holdout(second));
            (prefix(seq, second), v)
        }
    };
    Some(UserSplit {
        user: seq.user,
        train,
        validation,
        test: holdout(last),
    })
}

/// Positions whose successor is an online item, with that item.
pub fn training_targets(tokens: &[Token]) -> Vec<(usize, ItemId)> {
    tokens
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].is_online_item())
        .map(|(i, w)| (i, online_item(&w[1])))
        .collect()
}

/// `k` distinct items drawn uniformly from the catalog minus `excluded`.
/// The special token lies outside `0..catalog_size` and is never drawn.
pub fn sample_negatives<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    excluded: &BTreeSet<ItemId>,
    catalog_size: usize,
) -> Result<Vec<ItemId>> {
    let blocked = excluded.iter().filter(|i| i.in_catalog(catalog_size)).count();
    let available = catalog_size - blocked;
    if k > available {
        return Err(Error::CatalogExhausted {
            requested: k,
            available,
        });
    }
    if 4 * k <= available {
        let mut chosen = Vec::with_capacity(k);
        let mut taken = HashSet::with_capacity(k);
        while chosen.len() < k {
            let item = ItemId(rng.random_range(0..catalog_size as u32));
            if !excluded.contains(&item) && taken.insert(item) {
                chosen.push(item);
            }
        }
        return Ok(chosen);
    }
    let pool: Vec<ItemId> = (0..catalog_size as u32)
        .map(ItemId)
        .filter(|i| !excluded.contains(i))
        .collect();
    Ok(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

/// `-log softmax([positive, negatives...])[0]`.
pub fn sampled_ce_loss(positive: f64, negatives: &[f64]) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(positive);
    logits.extend_from_slice(negatives);
    log_sum_exp(&logits) - positive
}

/// A prepared model input with its supervised positions and this epoch's
/// negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub user: UserId,
    pub tokens: Vec<Token>,
    pub targets: Vec<(usize, ItemId)>,
    pub negatives: Vec<Vec<ItemId>>,
}

impl TrainingExample {
    fn ce_targets(&self) -> Vec<CeTarget> {
        self.targets
            .iter()
            .zip(&self.negatives)
            .map(|(&(position, item), negs)| {
                let mut candidates = Vec::with_capacity(negs.len() + 1);
                candidates.push(item.index());
                candidates.extend(negs.iter().map(|n| n.index()));
                CeTarget { position, candidates }
            })
            .collect()
    }
}

/// Builds the example a variant trains on, or `None` if no position is
/// supervised.
pub fn build_example<R: Rng + ?Sized>(
    split: &UserSplit,
    variant: Variant,
    max_seq_len: usize,
    negatives: usize,
    catalog_size: usize,
    rng: &mut R,
) -> Result<Option<TrainingExample>> {
    let tokens = model_input(variant, &split.train, max_seq_len);
    let targets = training_targets(&tokens);
    if targets.is_empty() {
        return Ok(None);
    }
    let mut excluded = split.test.interacted.clone();
    excluded.insert(ItemId::special(catalog_size));
    let negatives = targets
        .iter()
        .map(|&(_, target)| {
            debug_assert!(excluded.contains(&target));
            sample_negatives(rng, negatives, &excluded, catalog_size)
        })
        .collect::<Result<_>>()?;
    Ok(Some(TrainingExample {
        user: split.user,
        tokens,
        targets,
        negatives,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_hit10: Option<f64>,
    pub val_ndcg10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub selected_epoch: usize,
    pub log: Vec<EpochLog>,
    pub skipped_users: usize,
}

/// Adam over every parameter tensor.
pub struct Trainer {
    pub params: ModelParams,
    grads: Vec<Matrix>,
    states: Vec<AdamState>,
}

impl Trainer {
    pub fn new(params: ModelParams, lr: f64) -> Self {
        let config = AdamConfig { lr, ..AdamConfig::default() };
        Trainer {
            grads: params.zeros_like(),
            states: params.tensors.iter().map(|t| AdamState::for_param(t, config)).collect(),
            params,
        }
    }

    /// One optimizer step on the mean loss over all supervised positions of
    /// the batch; returns that loss.
    pub fn step(&mut self, batch: &[TrainingExample], mut rng: Option<&mut dyn RngCore>) -> Result<f64> {
        let total: usize = batch.iter().map(|e| e.targets.len()).sum();
        if total == 0 {
            return Err(Error::Contract("batch without supervised positions".into()));
        }
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
        let mut loss = 0.0;
        for example in batch {
            let weight = example.targets.len() as f64 / total as f64;
            let mut tape = Tape::new(&self.params.tensors);
            let hidden = record_forward(
                &mut tape,
                &example.tokens,
                &self.params,
                rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
            )?;
            let node = tape.sampled_softmax_ce(hidden, self.params.slots.item_emb, example.ce_targets())?;
            let value = tape.value(node).get(0, 0);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss for user {}", example.user)));
            }
            loss += weight * value;
            tape.backward(node, &mut self.grads, weight)?;
        }
        if self.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        for ((p, g), s) in self.params.tensors.iter_mut().zip(&self.grads).zip(&mut self.states) {
            adam_step(p, g, s)?;
        }
        Ok(loss)
    }
}

/// Trains `variant` on the dataset. The model config's encoder, dropout and
/// sequence limit are taken from the variant and `cfg`.
pub fn train(dataset: &[HybridSequence], variant: Variant, model: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ModelConfig {
        encoder: variant.encoder(),
        dropout: cfg.dropout,
        max_seq_len: cfg.max_seq_len,
        ..model
    };
    let catalog = model.catalog_size;
    for seq in dataset {
        seq.validate(catalog)?;
    }
    let splits: Vec<UserSplit> = dataset.iter().filter_map(|s| make_examples(s, cfg.mode)).collect();
    let skipped_users = dataset.len() - splits.len();
    let validation: Vec<Holdout> = splits.iter().filter_map(|s| s.validation.clone()).collect();
    if cfg.checkpoint == CheckpointPolicy::BestValidation && validation.is_empty() {
        return Err(Error::Data("no user has a validation target".into()));
    }

    let mut trainer = Trainer::new(ModelParams::init(model, cfg.seed)?, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let eval_cfg = EvalConfig {
        negatives: cfg.validation_negatives,
        ..EvalConfig::new(cfg.seed)
    };

    let mut order: Vec<usize> = (0..splits.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut any_supervised = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(e) =
                    build_example(&splits[i], variant, cfg.max_seq_len, cfg.negatives_per_step, catalog, &mut rng)?
                {
                    batch.push(e);
                }
            }
            let n: usize = batch.iter().map(|e| e.targets.len()).sum();
            if n == 0 {
                continue;
            }
            loss_sum += trainer.step(&batch, Some(&mut rng))? * n as f64;
            positions += n;
        }
        if positions == 0 {
            break;
        }
        any_supervised = true;
        let (val_hit10, val_ndcg10) = if validation.is_empty() {
            (None, None)
        } else {
            let s = evaluate_params(&trainer.params, variant, &validation, &eval_cfg)?;
            (Some(s.hit10), Some(s.ndcg10))
        };
        if cfg.checkpoint == CheckpointPolicy::BestValidation {
            let score = val_ndcg10.expect("validation present");
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, trainer.params.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / positions as f64,
            val_hit10,
            val_ndcg10,
        });
    }
    if !any_supervised {
        return Err(Error::Data("dataset has no supervised positions".into()));
    }
    let (selected_epoch, params) = match best {
        Some((_, epoch, params)) => (epoch, params),
        None => (log.len(), trainer.params),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            variant,
            seed: cfg.seed,
            params,
        },
        selected_epoch,
        log,
        skipped_users,
    })
}

/// Writes the per-epoch log as newline-delimited JSON.
pub fn write_metrics_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut buf, entry).expect("log serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
