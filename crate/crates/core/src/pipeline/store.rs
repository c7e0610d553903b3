use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::registry::FeatureRecord;
use crate::domain::{Timestamp, UserId};
use crate::error::{Error, Result};

/// Latest-value cache keyed by `(user, schema name)`.
#[derive(Debug, Default)]
pub struct OnlineCache {
    entries: RwLock<HashMap<(UserId, String), FeatureRecord>>,
}

impl OnlineCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps whichever record has the greater `as_of`; ties go to the newer put.
    pub fn put(&self, record: FeatureRecord) {
        let mut entries = self.entries.write().expect("cache lock poisoned");
        let key = (record.user, record.schema.clone());
        match entries.get(&key) {
            Some(existing) if existing.as_of > record.as_of => {}
            _ => {
                entries.insert(key, record);
            }
        }
    }

    pub fn get(&self, user: UserId, schema: &str) -> Result<FeatureRecord> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&(user, schema.to_string()))
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("no `{schema}` record for user {user}")))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only newline-delimited JSON files laid out as
/// `<root>/<schema>/<version>/part-<index>`.
#[derive(Debug, Clone)]
pub struct OfflineStore {
    root: PathBuf,
}

impl OfflineStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OfflineStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn partition(&self, schema: &str, version: u32) -> PathBuf {
        self.root.join(schema).join(version.to_string())
    }

    fn parts(dir: &Path) -> Result<Vec<PathBuf>> {
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut parts: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("part-"))
            })
            .collect();
        parts.sort();
        Ok(parts)
    }

    /// Writes the records as new part files, one per `(schema, version)`
    /// present, and returns the paths written.
    pub fn append(&self, records: &[FeatureRecord]) -> Result<Vec<PathBuf>> {
        let mut groups: Vec<((&str, u32), Vec<&FeatureRecord>)> = Vec::new();
        for r in records {
            let key = (r.schema.as_str(), r.version);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, g)) => g.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        let mut written = Vec::new();
        for ((schema, version), group) in groups {
            let dir = self.partition(schema, version);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let index = Self::parts(&dir)?.len();
            let path = dir.join(format!("part-{index:06}"));
            write_ndjson(&path, group)?;
            written.push(path);
        }
        Ok(written)
    }

    /// All records of `schema` (any version) with `as_of` in `range`, sorted
    /// by `(user, as_of)`; equal keys keep storage order.
    pub fn scan(&self, schema: &str, range: Range<Timestamp>) -> Result<Vec<FeatureRecord>> {
        let schema_dir = self.root.join(schema);
        if !schema_dir.exists() {
            return Ok(Vec::new());
        }
        let mut versions: Vec<(u32, PathBuf)> = fs::read_dir(&schema_dir)
            .map_err(|e| Error::io(&schema_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let v = p.file_name()?.to_str()?.parse().ok()?;
                Some((v, p))
            })
            .collect();
        versions.sort();
        let mut out = Vec::new();
        for (_, dir) in versions {
            for part in Self::parts(&dir)? {
                let records: Vec<FeatureRecord> = read_ndjson(&part)?;
                out.extend(records.into_iter().filter(|r| range.contains(&r.as_of)));
            }
        }
        out.sort_by_key(|r| (r.user, r.as_of));
        Ok(out)
    }
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Parse {
                path: path.into(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).expect("record serializes");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
