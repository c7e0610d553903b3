//! Seeded synthetic hybrid-behavior corpora with a planted cross-channel
//! signal.
//!
//! Every user walks a hidden Markov chain over shopping intents. Online
//! behaviors emit one item from the current intent; in-store behaviors emit a
//! basket whose members come from the current intent with probability `rho`
//! and uniformly from the catalog otherwise. Items are grouped by intent in
//! contiguous id blocks, so the intent of an item is `id / items_per_intent`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::domain::{Channel, ItemId, Timestamp, UserId};
use crate::error::{Error, Result};
use crate::pipeline::{write_ndjson, EventType, RawOnlineEvent, RawStoreTransaction, ONLINE_FILE, STORE_FILE};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const START_TIME: Timestamp = 1_700_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub users: usize,
    pub catalog_size: usize,
    pub intents: usize,
    pub items_per_intent: usize,
    pub min_behaviors: usize,
    pub mean_behaviors: f64,
    pub in_store_fraction: f64,
    pub set_size_mean: f64,
    pub set_size_max: usize,
    /// Probability that a basket member comes from the current intent.
    pub rho: f64,
    /// Probability of keeping the current intent between behaviors.
    pub stay_prob: f64,
    /// Zipf exponent of item popularity inside an intent block (0 = uniform).
    pub popularity_exponent: f64,
    /// Gaps between a user's behaviors are uniform in `1..=max_gap_secs`.
    pub max_gap_secs: i64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            users: 2000,
            catalog_size: 5000,
            intents: 10,
            items_per_intent: 500,
            min_behaviors: 20,
            mean_behaviors: 33.0,
            in_store_fraction: 0.40,
            set_size_mean: 5.0,
            set_size_max: 12,
            rho: 0.8,
            stay_prob: 0.85,
            popularity_exponent: 1.0,
            max_gap_secs: 6 * 3600,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("catalog_size", self.catalog_size),
            ("intents", self.intents),
            ("items_per_intent", self.items_per_intent),
            ("min_behaviors", self.min_behaviors),
            ("set_size_max", self.set_size_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.intents * self.items_per_intent > self.catalog_size {
            return Err(Error::Config(format!(
                "{} intents of {} items exceed the catalog of {}",
                self.intents, self.items_per_intent, self.catalog_size
            )));
        }
        if self.set_size_max > self.items_per_intent {
            return Err(Error::Config("an intent must hold a full-size basket".into()));
        }
        for (name, v) in [
            ("in_store_fraction", self.in_store_fraction),
            ("rho", self.rho),
            ("stay_prob", self.stay_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.mean_behaviors >= self.min_behaviors as f64) {
            return Err(Error::Config("mean_behaviors below min_behaviors".into()));
        }
        let uniform_mean = (self.set_size_max as f64 + 1.0) / 2.0;
        if !(self.set_size_mean >= 1.0 && self.set_size_mean < uniform_mean) {
            return Err(Error::Config(format!(
                "set_size_mean must lie in [1, {uniform_mean}) for max {}",
                self.set_size_max
            )));
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return Err(Error::Config("popularity_exponent must be finite and non-negative".into()));
        }
        if self.max_gap_secs < 1 {
            return Err(Error::Config("max_gap_secs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn intent_of(&self, item: ItemId) -> Option<usize> {
        let k = item.index() / self.items_per_intent;
        (k < self.intents).then_some(k)
    }
}

/// Weights of sizes `1..=max` for a geometric law truncated at `max` whose
/// mean is `mean`.
pub fn truncated_geometric_weights(mean: f64, max: usize) -> Vec<f64> {
    let weights = |p: f64| -> Vec<f64> { (0..max).map(|s| (1.0 - p).powi(s as i32) * p).collect() };
    let mean_of = |w: &[f64]| {
        let z: f64 = w.iter().sum();
        w.iter().enumerate().map(|(s, x)| (s + 1) as f64 * x).sum::<f64>() / z
    };
    if mean <= 1.0 {
        let mut w = vec![0.0; max];
        w[0] = 1.0;
        return w;
    }
    // the mean falls as p grows
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_of(&weights(mid)) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    weights(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub ts: Timestamp,
    pub channel: Channel,
    pub intent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GenConfig,
    pub users: BTreeMap<UserId, Vec<GroundTruthEvent>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub online: Vec<RawOnlineEvent>,
    pub store: Vec<RawStoreTransaction>,
    pub truth: GroundTruth,
}

const EVENT_WEIGHTS: [(EventType, f64); 4] = [
    (EventType::View, 0.6),
    (EventType::Click, 0.25),
    (EventType::AddToCart, 0.1),
    (EventType::Purchase, 0.05),
];

struct Samplers {
    set_size: WeightedIndex<f64>,
    /// Rank inside an intent block; low ids are the popular ones.
    rank: WeightedIndex<f64>,
    event_type: WeightedIndex<f64>,
}

impl Samplers {
    fn new(cfg: &GenConfig) -> Result<Self> {
        let set_size = WeightedIndex::new(truncated_geometric_weights(cfg.set_size_mean, cfg.set_size_max))
            .map_err(|e| Error::Config(format!("set size distribution: {e}")))?;
        let rank = WeightedIndex::new((1..=cfg.items_per_intent).map(|r| (r as f64).powf(-cfg.popularity_exponent)))
            .map_err(|e| Error::Config(format!("popularity distribution: {e}")))?;
        let event_type = WeightedIndex::new(EVENT_WEIGHTS.iter().map(|w| w.1)).expect("static weights");
        Ok(Samplers {
            set_size,
            rank,
            event_type,
        })
    }

    fn item_in_intent(&self, rng: &mut ChaCha8Rng, cfg: &GenConfig, intent: usize) -> ItemId {
        ItemId((intent * cfg.items_per_intent + self.rank.sample(rng)) as u32)
    }
}

fn generate_user(cfg: &GenConfig, user: UserId, corpus: &mut Corpus, samplers: &Samplers) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user);
    let extra = cfg.mean_behaviors - cfg.min_behaviors as f64;
    let n = cfg.min_behaviors
        + if extra > 0.0 {
            Poisson::new(extra).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };

    let mut intent = rng.random_range(0..cfg.intents);
    let mut ts = START_TIME;
    let mut truth = Vec::with_capacity(n);
    for step in 0..n {
        if step > 0 {
            ts += rng.random_range(1..=cfg.max_gap_secs);
            if cfg.intents > 1 && !rng.random_bool(cfg.stay_prob) {
                let other = rng.random_range(0..cfg.intents - 1);
                intent = if other >= intent { other + 1 } else { other };
            }
        }
        let channel = if rng.random_bool(cfg.in_store_fraction) {
            let size = samplers.set_size.sample(&mut rng) + 1;
            let mut items = BTreeSet::new();
            while items.len() < size {
                let item = if rng.random_bool(cfg.rho) {
                    samplers.item_in_intent(&mut rng, cfg, intent)
                } else {
                    ItemId(rng.random_range(0..cfg.catalog_size as u32))
                };
                items.insert(item);
            }
            corpus.store.push(RawStoreTransaction {
                user,
                items: items.into_iter().collect(),
                ts,
            });
            Channel::InStore
        } else {
            corpus.online.push(RawOnlineEvent {
                user,
                item: samplers.item_in_intent(&mut rng, cfg, intent),
                ts,
                event_type: EVENT_WEIGHTS[samplers.event_type.sample(&mut rng)].0,
            });
            Channel::Online
        };
        truth.push(GroundTruthEvent { ts, channel, intent });
    }
    corpus.truth.users.insert(user, truth);
}

/// Generates the corpus. Output is a pure function of the config.
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let samplers = Samplers::new(cfg)?;
    let mut corpus = Corpus {
        online: Vec::new(),
        store: Vec::new(),
        truth: GroundTruth {
            config: cfg.clone(),
            users: BTreeMap::new(),
        },
    };
    for user in 0..cfg.users as UserId {
        generate_user(cfg, user, &mut corpus, &samplers);
    }
    corpus.online.sort_by_key(|e| (e.ts, e.user));
    corpus.store.sort_by_key(|t| (t.ts, t.user));
    Ok(corpus)
}

/// Writes `online.ndjson`, `store.ndjson` and `ground_truth.json` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ndjson(&dir.join(ONLINE_FILE), &corpus.online)?;
    write_ndjson(&dir.join(STORE_FILE), &corpus.store)?;
    let path = dir.join(GROUND_TRUTH_FILE);
    let mut text = serde_json::to_string(&corpus.truth).expect("ground truth serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Most common intent among a basket's items (lowest intent on ties), or
/// `None` if no member belongs to an intent block.
pub fn dominant_intent(cfg: &GenConfig, items: &[ItemId]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for k in items.iter().filter_map(|&i| cfg.intent_of(i)) {
        *counts.entry(k).or_default() += 1;
    }
    let max = *counts.values().max()?;
    counts.into_iter().find(|&(_, c)| c == max).map(|(k, _)| k)
}

/// Plug-in mutual information (nats) between a basket's dominant intent and
/// the intent of the user's next online item, over all baskets followed by
/// an online behavior.
pub fn set_next_item_mutual_information(corpus: &Corpus) -> f64 {
    let cfg = &corpus.truth.config;
    let mut online_by_user: BTreeMap<UserId, Vec<&RawOnlineEvent>> = BTreeMap::new();
    for e in &corpus.online {
        online_by_user.entry(e.user).or_default().push(e);
    }
    let mut joint: BTreeMap<(Option<usize>, Option<usize>), f64> = BTreeMap::new();
    for tx in &corpus.store {
        let Some(events) = online_by_user.get(&tx.user) else { continue };
        let next = events.partition_point(|e| e.ts <= tx.ts);
        let Some(next) = events.get(next) else { continue };
        let key = (dominant_intent(cfg, &tx.items), cfg.intent_of(next.item));
        *joint.entry(key).or_default() += 1.0;
    }
    let total: f64 = joint.values().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut px: BTreeMap<Option<usize>, f64> = BTreeMap::new();
    let mut py: BTreeMap<Option<usize>, f64> = BTreeMap::new();
    for (&(x, y), &c) in &joint {
        *px.entry(x).or_default() += c / total;
        *py.entry(y).or_default() += c / total;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c / total;
            p * (p / (px[&x] * py[&y])).ln()
        })
        .sum()
}
