//! Dual ingestion, sliding-window micro-batching, cross-source join, feature
//! registry, online cache and offline store.
//!
//! The streaming path ([`StreamingPipeline`]) buffers events into event-time
//! windows and flushes a window once the online watermark (the largest online
//! timestamp seen) reaches its end. Each flush emits one `hybrid_seq` record
//! per active user holding that user's hybrid sequence inside the window; the
//! record carries the window bounds so consumers reading overlapping windows
//! can deduplicate. [`run_batch`] computes the same output in one pass.

mod registry;
mod store;
mod window;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domain::{build_hybrid_sequence, BehaviorEvent, HybridSequence, ItemId, Payload, Timestamp, TokenKind, UserId};
use crate::error::{Error, Result};

pub use registry::{FeatureRecord, FeatureRegistry, FeatureSchema, FieldSpec, FieldType};
pub use store::{read_ndjson, write_ndjson, OfflineStore, OnlineCache};
pub use window::{aggregate_window, assign_windows, join_online_instore, windows_covering, JoinedWindow, WindowConfig};

pub const HYBRID_SEQ_SCHEMA: &str = "hybrid_seq";
pub const REGISTRY_FILE: &str = "_registry.json";
pub const ONLINE_FILE: &str = "online.ndjson";
pub const STORE_FILE: &str = "store.ndjson";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    View,
    Click,
    AddToCart,
    Purchase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOnlineEvent {
    pub user: UserId,
    pub item: ItemId,
    pub ts: Timestamp,
    pub event_type: EventType,
}

impl RawOnlineEvent {
    pub fn to_behavior(&self) -> BehaviorEvent {
        BehaviorEvent::online(self.user, self.ts, self.item)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStoreTransaction {
    pub user: UserId,
    pub items: Vec<ItemId>,
    pub ts: Timestamp,
}

impl RawStoreTransaction {
    pub fn to_behavior(&self) -> Result<BehaviorEvent> {
        BehaviorEvent::in_store(self.user, self.ts, self.items.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    /// Cap on tokens per window snapshot.
    pub max_seq_len: usize,
}

impl PipelineConfig {
    pub fn new(window_secs: i64, slide_secs: i64) -> Result<Self> {
        Ok(PipelineConfig {
            window: WindowConfig::new(window_secs, slide_secs)?,
            max_seq_len: 90,
        })
    }
}

pub fn hybrid_seq_schema() -> FeatureSchema {
    FeatureSchema::new(
        HYBRID_SEQ_SCHEMA,
        vec![
            FieldSpec::required("user", FieldType::Integer),
            FieldSpec::required("window_start", FieldType::Integer),
            FieldSpec::required("window_end", FieldType::Integer),
            FieldSpec::required("tokens", FieldType::List),
        ],
        0,
    )
}

type DedupKey = (UserId, Timestamp, Payload);

fn dedup_key(e: &BehaviorEvent) -> DedupKey {
    (e.user, e.timestamp, e.payload.clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub flushes: usize,
    pub records: usize,
    pub duplicates_dropped: usize,
}

/// Destination of window flushes: registry-validated records go to both
/// stores.
pub struct FeatureSink<'a> {
    pub registry: &'a FeatureRegistry,
    pub cache: &'a OnlineCache,
    pub store: &'a OfflineStore,
    pub version: u32,
    pub max_seq_len: usize,
}

impl FeatureSink<'_> {
    fn emit(
        &self,
        start: Timestamp,
        cfg: &WindowConfig,
        online: &[RawOnlineEvent],
        store: &[RawStoreTransaction],
    ) -> Result<usize> {
        let groups = aggregate_window(online, start, cfg)?;
        let joined = join_online_instore(&groups, store, start, cfg)?;
        debug_assert!(joined.deferred.is_empty());
        let end = cfg.end(start);
        let mut records = Vec::with_capacity(joined.events.len());
        for (user, events) in &joined.events {
            let seq = build_hybrid_sequence(events, self.max_seq_len)?;
            let record = FeatureRecord {
                user: *user,
                schema: HYBRID_SEQ_SCHEMA.into(),
                version: self.version,
                as_of: end,
                payload: json!({
                    "user": user,
                    "window_start": start,
                    "window_end": end,
                    "tokens": seq.tokens,
                }),
            };
            self.registry.validate(&record)?;
            records.push(record);
        }
        if records.is_empty() {
            return Ok(0);
        }
        self.store.append(&records)?;
        let n = records.len();
        for r in records {
            self.cache.put(r);
        }
        Ok(n)
    }
}

#[derive(Default)]
struct WindowBuffer {
    online: Vec<RawOnlineEvent>,
    store: Vec<RawStoreTransaction>,
}

/// Event-time micro-batch operator.
pub struct StreamingPipeline<'a> {
    window: WindowConfig,
    sink: FeatureSink<'a>,
    open: BTreeMap<Timestamp, WindowBuffer>,
    seen: HashSet<DedupKey>,
    watermark: Option<Timestamp>,
    last_flushed: Option<Timestamp>,
    stats: PipelineStats,
}

impl<'a> StreamingPipeline<'a> {
    pub fn new(window: WindowConfig, sink: FeatureSink<'a>) -> Result<Self> {
        window.validate()?;
        Ok(StreamingPipeline {
            window,
            sink,
            open: BTreeMap::new(),
            seen: HashSet::new(),
            watermark: None,
            last_flushed: None,
            stats: PipelineStats::default(),
        })
    }

    pub fn watermark(&self) -> Option<Timestamp> {
        self.watermark
    }

    fn windows_for(&self, ts: Timestamp) -> Result<Vec<Timestamp>> {
        let starts = assign_windows(ts, &self.window);
        let closed = self.watermark.is_some_and(|w| self.window.end(starts[0]) <= w);
        if closed || self.last_flushed.is_some_and(|f| starts[0] <= f) {
            return Err(Error::LateData(format!(
                "event at {ts} belongs to window {} already closed",
                starts[0]
            )));
        }
        Ok(starts)
    }

    fn admit(&mut self, event: &BehaviorEvent) -> bool {
        let fresh = self.seen.insert(dedup_key(event));
        if !fresh {
            self.stats.duplicates_dropped += 1;
        }
        fresh
    }

    /// The watermark moves once the whole batch is in, so disorder inside a
    /// batch is tolerated.
    pub fn ingest_online(&mut self, batch: &[RawOnlineEvent]) -> Result<()> {
        let mut high = self.watermark;
        for e in batch {
            let starts = self.windows_for(e.ts)?;
            if !self.admit(&e.to_behavior()) {
                continue;
            }
            for s in starts {
                self.open.entry(s).or_default().online.push(e.clone());
            }
            high = Some(high.map_or(e.ts, |w| w.max(e.ts)));
        }
        self.watermark = high;
        Ok(())
    }

    /// Store transactions never move the watermark; ones beyond it wait in
    /// their windows until the online stream catches up.
    pub fn ingest_store(&mut self, batch: &[RawStoreTransaction]) -> Result<()> {
        for tx in batch {
            let behavior = tx.to_behavior()?;
            let starts = self.windows_for(tx.ts)?;
            if !self.admit(&behavior) {
                continue;
            }
            for s in starts {
                self.open.entry(s).or_default().store.push(tx.clone());
            }
        }
        Ok(())
    }

    fn flush(&mut self, start: Timestamp) -> Result<()> {
        let buffer = self.open.remove(&start).unwrap_or_default();
        self.stats.records += self.sink.emit(start, &self.window, &buffer.online, &buffer.store)?;
        self.stats.flushes += 1;
        self.last_flushed = Some(start);
        Ok(())
    }

    /// Flushes every open window whose end the watermark has reached.
    pub fn advance(&mut self) -> Result<usize> {
        let Some(watermark) = self.watermark else {
            return Ok(0);
        };
        let ready: Vec<Timestamp> = self
            .open
            .keys()
            .copied()
            .take_while(|s| self.window.end(*s) <= watermark)
            .collect();
        for s in &ready {
            self.flush(*s)?;
        }
        Ok(ready.len())
    }

    /// End of input: flushes everything still open.
    pub fn finish(mut self) -> Result<PipelineStats> {
        let remaining: Vec<Timestamp> = self.open.keys().copied().collect();
        for s in remaining {
            self.flush(s)?;
        }
        Ok(self.stats)
    }
}

/// Registry, cache and offline store produced by one pipeline run.
pub struct PipelineRun {
    pub registry: FeatureRegistry,
    pub cache: OnlineCache,
    pub store: OfflineStore,
    pub version: u32,
    pub stats: PipelineStats,
}

/// Opens `out`, discarding snapshots left by an earlier run.
fn prepare_outputs(out: &Path) -> Result<(FeatureRegistry, OnlineCache, OfflineStore, u32)> {
    let previous = out.join(HYBRID_SEQ_SCHEMA);
    if previous.exists() {
        std::fs::remove_dir_all(&previous).map_err(|e| Error::io(&previous, e))?;
    }
    let store = OfflineStore::open(out)?;
    let registry = FeatureRegistry::new();
    let version = registry.register(hybrid_seq_schema())?;
    Ok((registry, OnlineCache::new(), store, version))
}

/// Streams paired micro-batches (online batch `k` with store batch `k`)
/// through the windowing operator, writing into `out`.
pub fn run_pipeline<O, S>(online: O, store: S, cfg: &PipelineConfig, out: &Path) -> Result<PipelineRun>
where
    O: IntoIterator<Item = Vec<RawOnlineEvent>>,
    S: IntoIterator<Item = Vec<RawStoreTransaction>>,
{
    let (registry, cache, offline, version) = prepare_outputs(out)?;
    let stats = {
        let sink = FeatureSink {
            registry: &registry,
            cache: &cache,
            store: &offline,
            version,
            max_seq_len: cfg.max_seq_len,
        };
        let mut op = StreamingPipeline::new(cfg.window, sink)?;
        let mut online = online.into_iter();
        let mut store = store.into_iter();
        loop {
            let (o, s) = (online.next(), store.next());
            if o.is_none() && s.is_none() {
                break;
            }
            if let Some(batch) = s {
                op.ingest_store(&batch)?;
            }
            if let Some(batch) = o {
                op.ingest_online(&batch)?;
            }
            op.advance()?;
        }
        op.finish()?
    };
    registry.save(&out.join(REGISTRY_FILE))?;
    Ok(PipelineRun {
        registry,
        cache,
        store: offline,
        version,
        stats,
    })
}

/// One-shot computation over the complete input.
pub fn run_batch(
    online: &[RawOnlineEvent],
    store: &[RawStoreTransaction],
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<PipelineRun> {
    cfg.window.validate()?;
    let (registry, cache, offline, version) = prepare_outputs(out)?;
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    let mut keep = |e: BehaviorEvent| {
        let fresh = seen.insert(dedup_key(&e));
        duplicates += usize::from(!fresh);
        fresh
    };
    let online: Vec<&RawOnlineEvent> = online.iter().filter(|e| keep(e.to_behavior())).collect();
    let mut store_kept = Vec::new();
    for tx in store {
        if keep(tx.to_behavior()?) {
            store_kept.push(tx);
        }
    }

    let starts = windows_covering(
        online.iter().map(|e| e.ts).chain(store_kept.iter().map(|t| t.ts)),
        &cfg.window,
    );
    let sink = FeatureSink {
        registry: &registry,
        cache: &cache,
        store: &offline,
        version,
        max_seq_len: cfg.max_seq_len,
    };
    let mut stats = PipelineStats {
        duplicates_dropped: duplicates,
        ..Default::default()
    };
    for start in starts {
        let in_window: Vec<RawOnlineEvent> = online
            .iter()
            .filter(|e| cfg.window.contains(start, e.ts))
            .map(|e| (*e).clone())
            .collect();
        let tx_in_window: Vec<RawStoreTransaction> = store_kept
            .iter()
            .filter(|t| cfg.window.contains(start, t.ts))
            .map(|t| (*t).clone())
            .collect();
        stats.records += sink.emit(start, &cfg.window, &in_window, &tx_in_window)?;
        stats.flushes += 1;
    }
    registry.save(&out.join(REGISTRY_FILE))?;
    Ok(PipelineRun {
        registry,
        cache,
        store: offline,
        version,
        stats,
    })
}

/// Splits time-sorted inputs into paired micro-batches of `batch_secs`.
pub fn split_micro_batches(
    online: &[RawOnlineEvent],
    store: &[RawStoreTransaction],
    batch_secs: i64,
) -> Vec<(Vec<RawOnlineEvent>, Vec<RawStoreTransaction>)> {
    let mut buckets: BTreeMap<i64, (Vec<RawOnlineEvent>, Vec<RawStoreTransaction>)> = BTreeMap::new();
    for e in online {
        buckets.entry(e.ts.div_euclid(batch_secs)).or_default().0.push(e.clone());
    }
    for t in store {
        buckets.entry(t.ts.div_euclid(batch_secs)).or_default().1.push(t.clone());
    }
    buckets.into_values().collect()
}

/// Full per-user history straight from raw inputs, one sequence per user in
/// ascending user order.
pub fn batch_sequences(
    online: &[RawOnlineEvent],
    store: &[RawStoreTransaction],
    max_seq_len: usize,
) -> Result<Vec<HybridSequence>> {
    let mut per_user: BTreeMap<UserId, Vec<BehaviorEvent>> = BTreeMap::new();
    for e in online {
        per_user.entry(e.user).or_default().push(e.to_behavior());
    }
    for t in store {
        per_user.entry(t.user).or_default().push(t.to_behavior()?);
    }
    per_user
        .values()
        .map(|events| build_hybrid_sequence(events, max_seq_len))
        .collect()
}

/// Reassembles per-user sequences from the window snapshots in an offline
/// store, dropping the copies that overlapping windows produce.
pub fn sequences_from_store(store: &OfflineStore, max_seq_len: usize) -> Result<Vec<HybridSequence>> {
    let records = store.scan(HYBRID_SEQ_SCHEMA, Timestamp::MIN..Timestamp::MAX)?;
    let mut per_user: BTreeMap<UserId, BTreeSet<BehaviorEvent>> = BTreeMap::new();
    for r in records {
        let tokens: Vec<crate::domain::Token> = serde_json::from_value(r.payload["tokens"].clone())
            .map_err(|e| Error::Data(format!("bad tokens for user {}: {e}", r.user)))?;
        let events = per_user.entry(r.user).or_default();
        for t in tokens {
            let event = match t.kind {
                TokenKind::Item(item) => BehaviorEvent::online(r.user, t.timestamp, item),
                TokenKind::Set(items) => BehaviorEvent::in_store(r.user, t.timestamp, items)?,
            };
            events.insert(event);
        }
    }
    per_user
        .values()
        .map(|events| build_hybrid_sequence(&events.iter().cloned().collect::<Vec<_>>(), max_seq_len))
        .collect()
}

/// Reads `online.ndjson` and `store.ndjson` from `dir`.
pub fn load_raw(dir: &Path) -> Result<(Vec<RawOnlineEvent>, Vec<RawStoreTransaction>)> {
    Ok((read_ndjson(&dir.join(ONLINE_FILE))?, read_ndjson(&dir.join(STORE_FILE))?))
}
