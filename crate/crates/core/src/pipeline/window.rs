use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{RawOnlineEvent, RawStoreTransaction};
use crate::domain::{BehaviorEvent, Timestamp, UserId};
use crate::error::{Error, Result};

/// Sliding event-time windows. Window starts are multiples of the slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_secs: i64,
    pub slide_secs: i64,
}

impl WindowConfig {
    pub fn new(window_secs: i64, slide_secs: i64) -> Result<Self> {
        let cfg = WindowConfig {
            window_secs,
            slide_secs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_secs <= 0 || self.slide_secs <= 0 {
            return Err(Error::Config("window and slide must be positive".into()));
        }
        if self.slide_secs > self.window_secs || self.window_secs % self.slide_secs != 0 {
            return Err(Error::Config(format!(
                "window {}s must be a multiple of slide {}s",
                self.window_secs, self.slide_secs
            )));
        }
        Ok(())
    }

    pub fn windows_per_event(&self) -> usize {
        (self.window_secs / self.slide_secs) as usize
    }

    pub fn end(&self, start: Timestamp) -> Timestamp {
        start + self.window_secs
    }

    pub fn contains(&self, start: Timestamp, ts: Timestamp) -> bool {
        start <= ts && ts < self.end(start)
    }
}

/// Starts of every window containing `ts`, ascending.
pub fn assign_windows(ts: Timestamp, cfg: &WindowConfig) -> Vec<Timestamp> {
    let last = ts.div_euclid(cfg.slide_secs) * cfg.slide_secs;
    let n = cfg.windows_per_event() as i64;
    (0..n).rev().map(|k| last - k * cfg.slide_secs).collect()
}

/// Groups one window's online events per user, each group time ordered.
pub fn aggregate_window(
    events: &[RawOnlineEvent],
    start: Timestamp,
    cfg: &WindowConfig,
) -> Result<BTreeMap<UserId, Vec<RawOnlineEvent>>> {
    let mut groups: BTreeMap<UserId, Vec<RawOnlineEvent>> = BTreeMap::new();
    for e in events {
        if !cfg.contains(start, e.ts) {
            return Err(Error::Contract(format!(
                "event at {} outside window [{start}, {})",
                e.ts,
                cfg.end(start)
            )));
        }
        groups.entry(e.user).or_default().push(e.clone());
    }
    for group in groups.values_mut() {
        group.sort_by(|a, b| (a.ts, a.item, a.event_type).cmp(&(b.ts, b.item, b.event_type)));
    }
    Ok(groups)
}

/// Result of joining one window's online groups with the store batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinedWindow {
    pub events: BTreeMap<UserId, Vec<BehaviorEvent>>,
    /// Transactions past the window end, held for a later flush.
    pub deferred: Vec<RawStoreTransaction>,
}

/// Per-user union of online events and the store transactions that fall in
/// the window. Users present in one source only keep that source alone.
pub fn join_online_instore(
    online: &BTreeMap<UserId, Vec<RawOnlineEvent>>,
    store: &[RawStoreTransaction],
    start: Timestamp,
    cfg: &WindowConfig,
) -> Result<JoinedWindow> {
    let mut out = JoinedWindow::default();
    for (user, group) in online {
        out.events
            .entry(*user)
            .or_default()
            .extend(group.iter().map(RawOnlineEvent::to_behavior));
    }
    for tx in store {
        if tx.ts >= cfg.end(start) {
            out.deferred.push(tx.clone());
        } else if tx.ts < start {
            return Err(Error::Contract(format!(
                "store transaction at {} precedes window start {start}",
                tx.ts
            )));
        } else {
            out.events.entry(tx.user).or_default().push(tx.to_behavior()?);
        }
    }
    for events in out.events.values_mut() {
        events.sort_by(|a, b| (a.timestamp, &a.payload).cmp(&(b.timestamp, &b.payload)));
    }
    Ok(out)
}

/// Every window start touched by any of the timestamps, ascending.
pub fn windows_covering(timestamps: impl IntoIterator<Item = Timestamp>, cfg: &WindowConfig) -> BTreeSet<Timestamp> {
    timestamps
        .into_iter()
        .flat_map(|ts| assign_windows(ts, cfg))
        .collect()
}
