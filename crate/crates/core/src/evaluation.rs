//! Sampled ranking evaluation: each held-out target is ranked against 100
//! seeded negatives and scored with Hit@10 and NDCG@10.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{HybridSequence, ItemId, Token, UserId};
use crate::error::{Error, Result};
use crate::model::{forward_hidden, score_candidates, Checkpoint, ModelParams, Variant};
use crate::training::{make_examples, sample_negatives, SplitMode};

pub const EVAL_NEGATIVES: usize = 100;
pub const EVAL_K: usize = 10;

/// Which items may not be drawn as evaluation negatives, besides the special
/// token and the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Everything the user interacted with, through either channel.
    #[default]
    History,
    TargetOnly,
}

impl std::str::FromStr for ExclusionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "history" => Ok(ExclusionPolicy::History),
            "target-only" | "target_only" => Ok(ExclusionPolicy::TargetOnly),
            _ => Err(Error::Config(format!("unknown exclusion policy `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub negatives: usize,
    pub k: usize,
    pub policy: ExclusionPolicy,
}

impl EvalConfig {
    pub fn new(seed: u64) -> Self {
        EvalConfig {
            seed,
            negatives: EVAL_NEGATIVES,
            k: EVAL_K,
            policy: ExclusionPolicy::History,
        }
    }
}

/// 1-based rank of `scores[target]`. Ties count against the target.
pub fn rank_target(scores: &[f64], target: usize) -> Result<usize> {
    let t = *scores
        .get(target)
        .ok_or_else(|| Error::Contract(format!("target index {target} outside {} scores", scores.len())))?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i != target))
        .count();
    Ok(1 + ahead)
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// One held-out prediction task: the user's history up to (excluding) the
/// target.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    pub user: UserId,
    pub context: HybridSequence,
    pub target: ItemId,
    pub interacted: BTreeSet<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user: UserId,
    pub target: ItemId,
    /// Target first, then the negatives in draw order.
    pub candidates: Vec<ItemId>,
    pub scores: Vec<f64>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub hit10: f64,
    pub ndcg10: f64,
    pub users: usize,
    pub skipped: usize,
    pub records: Vec<EvalRecord>,
}

/// Negatives for one user. The stream depends only on `(seed, user)`, so
/// every variant sees the same candidates.
pub fn eval_negatives(holdout: &Holdout, cfg: &EvalConfig, catalog_size: usize) -> Result<Vec<ItemId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(holdout.user);
    let mut excluded = match cfg.policy {
        ExclusionPolicy::History => holdout.interacted.clone(),
        ExclusionPolicy::TargetOnly => BTreeSet::new(),
    };
    excluded.insert(holdout.target);
    sample_negatives(&mut rng, cfg.negatives, &excluded, catalog_size)
}

/// Ranks every holdout with an arbitrary scorer, aggregating in ascending
/// user order.
pub fn evaluate_with<F>(holdouts: &[Holdout], cfg: &EvalConfig, catalog_size: usize, mut scorer: F) -> Result<EvalSummary>
where
    F: FnMut(&Holdout, &[ItemId]) -> Result<Vec<f64>>,
{
    let mut order: Vec<&Holdout> = holdouts.iter().collect();
    order.sort_by_key(|h| h.user);
    let mut records = Vec::with_capacity(order.len());
    for h in order {
        let mut candidates = vec![h.target];
        candidates.extend(eval_negatives(h, cfg, catalog_size)?);
        let scores = scorer(h, &candidates)?;
        if scores.len() != candidates.len() {
            return Err(Error::Dimension(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        let rank = rank_target(&scores, 0)?;
        records.push(EvalRecord {
            user: h.user,
            target: h.target,
            candidates,
            scores,
            rank,
        });
    }
    let n = records.len();
    let (mut hit, mut ndcg) = (0.0, 0.0);
    for r in &records {
        hit += hit_at_k(r.rank, cfg.k);
        ndcg += ndcg_at_k(r.rank, cfg.k);
    }
    let denom = n.max(1) as f64;
    Ok(EvalSummary {
        hit10: hit / denom,
        ndcg10: ndcg / denom,
        users: n,
        skipped: 0,
        records,
    })
}

/// Tokens the model of `variant` sees for a context, capped at the model's
/// sequence limit.
pub fn model_input(variant: Variant, context: &HybridSequence, max_seq_len: usize) -> Vec<Token> {
    let mut tokens = variant.prepare(context).tokens;
    if tokens.len() > max_seq_len {
        tokens.drain(..tokens.len() - max_seq_len);
    }
    tokens
}

/// Scores candidates from the last hidden state of the prepared context.
pub fn score_holdout(params: &ModelParams, variant: Variant, holdout: &Holdout, candidates: &[ItemId]) -> Result<Vec<f64>> {
    let tokens = model_input(variant, &holdout.context, params.config.max_seq_len);
    if tokens.is_empty() {
        return Err(Error::Contract(format!("user {} has an empty context", holdout.user)));
    }
    let hidden = forward_hidden(&tokens, params)?;
    score_candidates(hidden.row(hidden.rows() - 1), candidates, params)
}

pub fn evaluate_params(params: &ModelParams, variant: Variant, holdouts: &[Holdout], cfg: &EvalConfig) -> Result<EvalSummary> {
    evaluate_with(holdouts, cfg, params.config.catalog_size, |h, c| score_holdout(params, variant, h, c))
}

/// Test holdouts (last online behavior) for every user that has one; the
/// second return value counts users without a valid target.
pub fn test_holdouts(dataset: &[HybridSequence]) -> (Vec<Holdout>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for seq in dataset {
        match make_examples(seq, SplitMode::Paper) {
            Some(split) => out.push(split.test),
            None => skipped += 1,
        }
    }
    (out, skipped)
}

/// Test-set evaluation of a checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &[HybridSequence], cfg: &EvalConfig) -> Result<EvalSummary> {
    let catalog = checkpoint.params.config.catalog_size;
    for seq in dataset {
        seq.validate(catalog)?;
    }
    let (holdouts, skipped) = test_holdouts(dataset);
    let mut summary = evaluate_params(&checkpoint.params, checkpoint.variant, &holdouts, cfg)?;
    summary.skipped = skipped;
    Ok(summary)
}

/// Hex SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub hit10: f64,
    pub ndcg10: f64,
    /// Relative change against the online-only row, in percent.
    pub hit10_delta_pct: Option<f64>,
    pub ndcg10_delta_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn new(results: &[(Variant, f64, f64)]) -> Self {
        let mut sorted = results.to_vec();
        sorted.sort_by_key(|r| r.0);
        let base = sorted.iter().find(|r| r.0 == Variant::OnlineOnly).map(|r| (r.1, r.2));
        let delta = |v: f64, b: f64| if b > 0.0 { Some((v - b) / b * 100.0) } else { None };
        let rows = sorted
            .into_iter()
            .map(|(variant, hit10, ndcg10)| ComparisonRow {
                variant,
                hit10,
                ndcg10,
                hit10_delta_pct: base.and_then(|b| delta(hit10, b.0)),
                ndcg10_delta_pct: base.and_then(|b| delta(ndcg10, b.1)),
            })
            .collect();
        ComparisonTable { rows }
    }

    /// Plain-text table; the best value per metric is starred.
    pub fn render(&self) -> String {
        let best_hit = self.rows.iter().map(|r| r.hit10).fold(f64::MIN, f64::max);
        let best_ndcg = self.rows.iter().map(|r| r.ndcg10).fold(f64::MIN, f64::max);
        let pct = |d: Option<f64>| d.map_or("-".to_string(), |d| format!("{d:+.2}%"));
        let mut out = format!("{:<12} {:>9} {:>9} {:>9} {:>9}\n", "variant", "Hit@10", "Δ", "NDCG@10", "Δ");
        for r in &self.rows {
            let star = |v: f64, best: f64| if v == best { "*" } else { " " };
            out.push_str(&format!(
                "{:<12} {:>8.4}{} {:>9} {:>8.4}{} {:>9}\n",
                r.variant.name(),
                r.hit10,
                star(r.hit10, best_hit),
                pct(r.hit10_delta_pct),
                r.ndcg10,
                star(r.ndcg10, best_ndcg),
                pct(r.ndcg10_delta_pct),
            ));
        }
        out
    }
}
