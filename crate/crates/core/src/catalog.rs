//! The store and the index kept in step behind one writer path.
//!
//! Every mutation goes through [`Catalog::apply_page`]: the page is journaled
//! first and only then applied to the in-memory index, so a search never sees
//! a record the journal would not replay.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use thiserror::Error;

use crate::dc::parse_record;
use crate::harvest::{ConfigError, HarvestError, HarvestState, PageStats, ProviderConfig};
use crate::index::query::{search_json, ParamError, Query, SearchParams};
use crate::index::{Index, IndexError, SearchResult};
use crate::model::{make_record_id, validate_record, MetadataRecord, RecordId, Tombstone};
use crate::oai::RawRecord;
use crate::store::{JournalOp, Store, StoreError};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Catalog {
    store: Mutex<Store>,
    index: RwLock<Index>,
    running: Arc<Mutex<HashSet<String>>>,
}

/// Exclusive right to harvest one provider; released on drop. The guard
/// owns its claim, so it can be moved to the thread doing the harvest.
#[derive(Debug)]
pub struct HarvestGuard {
    running: Arc<Mutex<HashSet<String>>>,
    provider_key: String,
}

impl HarvestGuard {
    pub fn provider_key(&self) -> &str {
        &self.provider_key
    }
}

impl Drop for HarvestGuard {
    fn drop(&mut self) {
        self.running.lock().remove(&self.provider_key);
    }
}

impl std::fmt::Debug for Catalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Catalog")
            .field("records", &self.index.read().len())
            .finish_non_exhaustive()
    }
}

/// What the current state says about one record id.
#[derive(Clone, Copy)]
enum Known {
    Live(DateTime<Utc>),
    Deleted(DateTime<Utc>),
}

impl Catalog {
    /// Open a writable catalog, replaying the journal into a fresh index.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Ok(Self::from_store(Store::open(dir)?))
    }

    pub fn open_with_providers_file(
        dir: impl AsRef<Path>,
        providers_file: Option<PathBuf>,
    ) -> Result<Self, StoreError> {
        let mut store = Store::open(dir)?;
        if let Some(p) = providers_file {
            store = store.with_providers_file(p);
        }
        Ok(Self::from_store(store))
    }

    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Ok(Self::from_store(Store::open_read_only(dir)?))
    }

    pub fn from_store(store: Store) -> Self {
        let index = Index::from_records(store.live().records.values());
        Self {
            store: Mutex::new(store),
            index: RwLock::new(index),
            running: Arc::new(Mutex::new(HashSet::new())),
        }
    }

    pub fn index(&self) -> RwLockReadGuard<'_, Index> {
        self.index.read()
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn store_dir(&self) -> PathBuf {
        self.store.lock().dir().to_path_buf()
    }

    pub fn last_seq(&self) -> u64 {
        self.store.lock().last_seq()
    }

    pub fn recovered_bytes(&self) -> u64 {
        self.store.lock().recovered_bytes()
    }

    pub fn search(&self, query: &Query) -> Result<SearchResult, IndexError> {
        self.index.read().search(query)
    }

    pub fn search_json(&self, params: &SearchParams) -> Result<String, ParamError> {
        search_json(&self.index.read(), params)
    }

    /// The live record with this id, if any.
    pub fn record(&self, id: &RecordId) -> Option<MetadataRecord> {
        self.store.lock().live().records.get(id).cloned()
    }

    /// All live records in record-id order.
    pub fn records(&self) -> Vec<MetadataRecord> {
        self.store.lock().live().records.values().cloned().collect()
    }

    pub fn providers(&self) -> Result<Vec<ProviderConfig>, StoreError> {
        self.store.lock().load_providers()
    }

    pub fn provider(&self, key: &str) -> Result<Option<ProviderConfig>, StoreError> {
        Ok(self
            .providers()?
            .into_iter()
            .find(|p| p.provider_key == key))
    }

    /// Add a provider or replace the one with the same key. Returns true
    /// when the key was new.
    pub fn put_provider(&self, provider: ProviderConfig) -> Result<bool, CatalogError> {
        provider.validate()?;
        let store = self.store.lock();
        let mut providers = store.load_providers()?;
        let created = match providers
            .iter_mut()
            .find(|p| p.provider_key == provider.provider_key)
        {
            Some(slot) => {
                *slot = provider;
                false
            }
            None => {
                providers.push(provider);
                true
            }
        };
        store.save_providers(&providers)?;
        Ok(created)
    }

    /// Remove a provider's configuration. Its records stay in the catalog.
    pub fn remove_provider(&self, key: &str) -> Result<bool, StoreError> {
        let store = self.store.lock();
        let mut providers = store.load_providers()?;
        let before = providers.len();
        providers.retain(|p| p.provider_key != key);
        if providers.len() == before {
            return Ok(false);
        }
        store.save_providers(&providers)?;
        Ok(true)
    }

    pub fn harvest_states(&self) -> Result<BTreeMap<String, HarvestState>, StoreError> {
        self.store.lock().load_harvest_states()
    }

    pub fn harvest_state(&self, key: &str) -> Result<HarvestState, StoreError> {
        Ok(self
            .harvest_states()?
            .remove(key)
            .unwrap_or_else(|| HarvestState::new(key)))
    }

    /// Persist a state. The success cursor never moves backwards, whatever
    /// the caller passes in.
    pub fn save_harvest_state(&self, mut state: HarvestState) -> Result<(), StoreError> {
        let store = self.store.lock();
        let mut states = store.load_harvest_states()?;
        if let Some(prev) = states
            .get(&state.provider_key)
            .and_then(|s| s.last_success_datestamp)
        {
            state.last_success_datestamp =
                Some(state.last_success_datestamp.map_or(prev, |d| d.max(prev)));
        }
        states.insert(state.provider_key.clone(), state);
        store.save_harvest_states(&states)
    }

    /// Claim the right to harvest `key`; fails if a harvest is running.
    pub fn try_begin_harvest(&self, key: &str) -> Result<HarvestGuard, HarvestError> {
        if !self.running.lock().insert(key.to_string()) {
            return Err(HarvestError::InProgress(key.to_string()));
        }
        Ok(HarvestGuard {
            running: self.running.clone(),
            provider_key: key.to_string(),
        })
    }

    pub fn is_harvesting(&self, key: &str) -> bool {
        self.running.lock().contains(key)
    }

    /// Classify, journal and index one page of harvested records. Either
    /// the whole page is journaled or none of it is.
    pub fn apply_page(
        &self,
        records: &[RawRecord],
        provider: &ProviderConfig,
    ) -> Result<PageStats, StoreError> {
        let key = provider.provider_key.as_str();
        let mut store = self.store.lock();
        let mut stats = PageStats::default();
        let mut ops = Vec::new();
        let mut pending: HashMap<RecordId, Known> = HashMap::new();

        for raw in records {
            stats.max_datestamp = Some(
                stats
                    .max_datestamp
                    .map_or(raw.datestamp, |m| m.max(raw.datestamp)),
            );
            let record_id = match make_record_id(key, &raw.identifier) {
                Ok(id) => id,
                Err(e) => {
                    tracing::warn!(identifier = %raw.identifier, "skipping record: {e}");
                    stats.warnings += 1;
                    continue;
                }
            };
            let known = pending.get(&record_id).copied().or_else(|| {
                let live = store.live();
                live.records
                    .get(&record_id)
                    .map(|r| Known::Live(r.datestamp))
                    .or_else(|| live.tombstones.get(&record_id).map(|d| Known::Deleted(*d)))
            });

            if raw.deleted {
                if matches!(known, Some(Known::Deleted(d)) if d >= raw.datestamp) {
                    stats.unchanged += 1;
                    continue;
                }
                stats.deleted += 1;
                pending.insert(record_id.clone(), Known::Deleted(raw.datestamp));
                ops.push(JournalOp::Tombstone(Tombstone {
                    record_id,
                    datestamp: raw.datestamp,
                }));
                continue;
            }

            let record = match parse_record(raw)
                .map_err(|e| e.to_string())
                .and_then(|draft| {
                    for w in &draft.parse_warnings {
                        tracing::debug!(identifier = %raw.identifier, "parse warning: {w}");
                    }
                    draft.into_record(key).map_err(|e| e.to_string())
                })
                .and_then(|r| {
                    validate_record(r).map_err(|vs| {
                        vs.iter()
                            .map(ToString::to_string)
                            .collect::<Vec<_>>()
                            .join("; ")
                    })
                }) {
                Ok(r) => r,
                Err(reason) => {
                    tracing::warn!(identifier = %raw.identifier, "skipping invalid record: {reason}");
                    stats.warnings += 1;
                    continue;
                }
            };

            match known {
                Some(Known::Live(d)) if raw.datestamp <= d => {
                    stats.unchanged += 1;
                    continue;
                }
                Some(Known::Live(_)) => stats.updated += 1,
                _ => stats.new += 1,
            }
            pending.insert(record_id, Known::Live(record.datestamp));
            ops.push(JournalOp::Upsert(record));
        }

        let entries = store.append_batch(ops)?;
        let mut index = self.index.write();
        drop(store);
        for entry in &entries {
            match &entry.op {
                JournalOp::Upsert(r) => {
                    index
                        .upsert_document(r)
                        .expect("validated records are indexable");
                }
                JournalOp::Tombstone(t) => {
                    index.delete_document(&t.record_id);
                }
            }
        }
        Ok(stats)
    }

    /// Journal and index already-canonical records, such as the lines of an
    /// export. Records that fail validation or are not fresher than the
    /// stored copy are skipped. Returns how many were written.
    pub fn import_records(
        &self,
        records: impl IntoIterator<Item = MetadataRecord>,
    ) -> Result<usize, StoreError> {
        let mut store = self.store.lock();
        let mut latest: HashMap<RecordId, MetadataRecord> = HashMap::new();
        for record in records {
            let record = match validate_record(record) {
                Ok(r) => r,
                Err(vs) => {
                    tracing::warn!("skipping invalid record: {}", vs[0]);
                    continue;
                }
            };
            let stored = latest
                .get(&record.record_id)
                .map(|r| r.datestamp)
                .or_else(|| {
                    store
                        .live()
                        .records
                        .get(&record.record_id)
                        .map(|r| r.datestamp)
                });
            if stored.is_some_and(|d| record.datestamp <= d) {
                continue;
            }
            latest.insert(record.record_id.clone(), record);
        }
        let mut fresh: Vec<MetadataRecord> = latest.into_values().collect();
        fresh.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let entries = store.append_batch(fresh.into_iter().map(JournalOp::Upsert).collect())?;
        let mut index = self.index.write();
        drop(store);
        for entry in &entries {
            if let JournalOp::Upsert(r) = &entry.op {
                index
                    .upsert_document(r)
                    .expect("validated records are indexable");
            }
        }
        Ok(entries.len())
    }

    /// Rebuild the in-memory index from the journal's live state.
    pub fn rebuild_index(&self) -> usize {
        let store = self.store.lock();
        let fresh = Index::from_records(store.live().records.values());
        let n = fresh.len();
        *self.index.write() = fresh;
        n
    }

    /// Compact the journal to one entry per live record.
    pub fn compact(&self) -> Result<usize, StoreError> {
        self.store.lock().compact()
    }
}
