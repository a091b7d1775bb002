//! Centralized in-memory inverted index.
//!
//! Ranking is field-weighted TF-IDF:
//!
//! ```text
//! score(d, q) = Σ_{t ∈ distinct(q)} tf(t, d) · ln(1 + N / df(t))
//! tf(t, d)    = 3·title + 2·keywords + abstract + attribute_names + lineage
//! ```
//!
//! Terms that occur in no live document contribute nothing. Ties are broken
//! by record id ascending everywhere so results form a total order.

mod filter;
pub mod query;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MetadataRecord, RecordId, SpatialExtent, TemporalExtent};
use crate::time::rfc3339;

pub use filter::{bbox_intersects, temporal_overlaps};
pub use query::{ParamError, Query, SearchParams};

pub const MAX_PAGE_SIZE: u32 = 100;
pub const KEYWORD_FACET_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("deleted record {0} must be removed with delete_document")]
    DeletedRecord(RecordId),
    #[error("page must be at least 1")]
    BadPage,
    #[error("size must be within [1, {MAX_PAGE_SIZE}]")]
    BadSize,
}

/// Lowercase and split on every character that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(fold_case)
        .collect()
}

fn fold_case(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c == 'ς' {
                return 'σ';
            }
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                // multi-char lowercase mappings have no simple fold
                _ => c,
            }
        })
        .collect()
}

/// Query terms with duplicates removed, first-occurrence order kept.
pub fn distinct_terms(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokenize(text) {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Title,
    Keywords,
    Abstract,
    AttributeNames,
    Lineage,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Title,
        Field::Keywords,
        Field::Abstract,
        Field::AttributeNames,
        Field::Lineage,
    ];

    pub fn weight(self) -> f64 {
        match self {
            Field::Title => 3.0,
            Field::Keywords => 2.0,
            Field::Abstract | Field::AttributeNames | Field::Lineage => 1.0,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexDocument {
    pub record_id: RecordId,
    pub title: String,
    pub provider_key: String,
    pub keywords_raw: Vec<String>,
    pub spatial: Option<SpatialExtent>,
    pub temporal: Option<TemporalExtent>,
    pub datestamp: DateTime<Utc>,
    field_token_counts: [HashMap<String, u32>; 5],
}

fn count_tokens<'a>(texts: impl IntoIterator<Item = &'a str>) -> HashMap<String, u32> {
    let mut counts = HashMap::new();
    for text in texts {
        for t in tokenize(text) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

impl IndexDocument {
    pub fn from_record(record: &MetadataRecord) -> Self {
        Self {
            record_id: record.record_id.clone(),
            title: record.title.clone(),
            provider_key: record.provider_key.clone(),
            keywords_raw: record.keywords.clone(),
            spatial: record.spatial,
            temporal: record.temporal,
            datestamp: record.datestamp,
            field_token_counts: [
                count_tokens([record.title.as_str()]),
                count_tokens(record.keywords.iter().map(String::as_str)),
                count_tokens([record.r#abstract.as_str()]),
                count_tokens(record.attributes.iter().map(|a| a.name.as_str())),
                count_tokens([record.lineage.as_str()]),
            ],
        }
    }

    pub fn count(&self, field: Field, term: &str) -> u32 {
        self.field_token_counts[field.slot()]
            .get(term)
            .copied()
            .unwrap_or(0)
    }

    pub fn term_frequency(&self, term: &str) -> f64 {
        Field::ALL
            .iter()
            .map(|&f| f.weight() * f64::from(self.count(f, term)))
            .sum()
    }

    fn terms(&self) -> BTreeSet<&str> {
        self.field_token_counts
            .iter()
            .flat_map(|m| m.keys().map(String::as_str))
            .collect()
    }
}

/// Document count and document frequencies needed for scoring.
pub struct CorpusStats<'a> {
    pub documents: usize,
    postings: &'a HashMap<String, BTreeSet<RecordId>>,
}

impl CorpusStats<'_> {
    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, BTreeSet::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df(term);
        if df == 0 {
            return 0.0;
        }
        (1.0 + self.documents as f64 / df as f64).ln()
    }
}

pub fn score(doc: &IndexDocument, query_terms: &[String], stats: &CorpusStats<'_>) -> f64 {
    // Terms with equal document frequency share an idf. Summing their
    // (integer-valued) weighted frequencies first keeps the result
    // independent of term order, so equal scores compare equal bit for bit.
    let mut by_df: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for t in query_terms {
        let df = stats.df(t);
        if df > 0 {
            by_df.entry(df).or_insert((0.0, stats.idf(t))).0 += doc.term_frequency(t);
        }
    }
    by_df.values().map(|(tf, idf)| tf * idf).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub record_id: RecordId,
    pub score: f64,
    pub title: String,
    pub provider_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial: Option<SpatialExtent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalExtent>,
    #[serde(with = "rfc3339")]
    pub datestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCount {
    pub keyword: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Facets {
    pub providers: BTreeMap<String, usize>,
    pub keywords: Vec<KeywordCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub total: usize,
    pub page: u32,
    pub size: u32,
    pub hits: Vec<Hit>,
    pub facets: Facets,
}

/// Compute provider and top keyword facets over a candidate set.
pub fn compute_facets<'a>(docs: impl IntoIterator<Item = &'a IndexDocument>) -> Facets {
    let mut providers = BTreeMap::new();
    let mut keywords: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        *providers.entry(d.provider_key.clone()).or_insert(0) += 1;
        for k in &d.keywords_raw {
            *keywords.entry(k.as_str()).or_insert(0) += 1;
        }
    }
    let mut keywords: Vec<KeywordCount> = keywords
        .into_iter()
        .map(|(k, count)| KeywordCount {
            keyword: k.to_string(),
            count,
        })
        .collect();
    keywords.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.keyword.cmp(&b.keyword))
    });
    keywords.truncate(KEYWORD_FACET_LIMIT);
    Facets {
        providers,
        keywords,
    }
}

#[derive(Debug, Default, Clone)]
pub struct Index {
    docs: HashMap<RecordId, IndexDocument>,
    postings: HashMap<String, BTreeSet<RecordId>>,
}

impl Index {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build an index from live records (deleted ones are skipped).
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a MetadataRecord>) -> Self {
        let mut idx = Self::new();
        for r in records {
            if !r.deleted {
                let _ = idx.upsert_document(r);
            }
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &RecordId) -> Option<&IndexDocument> {
        self.docs.get(id)
    }

    pub fn contains(&self, id: &RecordId) -> bool {
        self.docs.contains_key(id)
    }

    pub fn ids(&self) -> BTreeSet<RecordId> {
        self.docs.keys().cloned().collect()
    }

    pub fn stats(&self) -> CorpusStats<'_> {
        CorpusStats {
            documents: self.docs.len(),
            postings: &self.postings,
        }
    }

    /// Insert or replace a document. Returns whether the index changed;
    /// a record older than the stored version is ignored.
    pub fn upsert_document(&mut self, record: &MetadataRecord) -> Result<bool, IndexError> {
        if record.deleted {
            return Err(IndexError::DeletedRecord(record.record_id.clone()));
        }
        if let Some(existing) = self.docs.get(&record.record_id) {
            if record.datestamp < existing.datestamp {
                return Ok(false);
            }
        }
        self.delete_document(&record.record_id);
        let doc = IndexDocument::from_record(record);
        for term in doc.terms() {
            self.postings
                .entry(term.to_string())
                .or_default()
                .insert(doc.record_id.clone());
        }
        self.docs.insert(doc.record_id.clone(), doc);
        Ok(true)
    }

    pub fn delete_document(&mut self, id: &RecordId) -> bool {
        let Some(doc) = self.docs.remove(id) else {
            return false;
        };
        for term in doc.terms() {
            if let Some(set) = self.postings.get_mut(term) {
                set.remove(id);
                if set.is_empty() {
                    self.postings.remove(term);
                }
            }
        }
        true
    }

    fn passes_filters(doc: &IndexDocument, query: &Query) -> bool {
        if let Some(b) = &query.bbox {
            match &doc.spatial {
                Some(s) if bbox_intersects(s, b) => {}
                _ => return false,
            }
        }
        if let Some(i) = &query.interval {
            match &doc.temporal {
                Some(t) if temporal_overlaps(t, i) => {}
                _ => return false,
            }
        }
        if let Some(p) = &query.provider_filter {
            if &doc.provider_key != p {
                return false;
            }
        }
        if let Some(k) = &query.keyword_filter {
            let k = k.to_lowercase();
            if !doc.keywords_raw.iter().any(|raw| raw.to_lowercase() == k) {
                return false;
            }
        }
        true
    }

    pub fn search(&self, query: &Query) -> Result<SearchResult, IndexError> {
        if query.page < 1 {
            return Err(IndexError::BadPage);
        }
        if query.size < 1 || query.size > MAX_PAGE_SIZE {
            return Err(IndexError::BadSize);
        }
        let terms = distinct_terms(&query.terms_text);
        let stats = self.stats();

        let mut ranked: Vec<(&IndexDocument, f64)> = if terms.is_empty() {
            self.docs
                .values()
                .filter(|d| Self::passes_filters(d, query))
                .map(|d| (d, 0.0))
                .collect()
        } else {
            let mut ids: BTreeSet<&RecordId> = BTreeSet::new();
            for t in &terms {
                if let Some(set) = self.postings.get(t) {
                    ids.extend(set.iter());
                }
            }
            ids.into_iter()
                .map(|id| &self.docs[id])
                .filter(|d| Self::passes_filters(d, query))
                .map(|d| (d, score(d, &terms, &stats)))
                .filter(|(_, s)| *s > 0.0)
                .collect()
        };

        if terms.is_empty() {
            ranked.sort_by(|(a, _), (b, _)| {
                b.datestamp
                    .cmp(&a.datestamp)
                    .then_with(|| a.record_id.cmp(&b.record_id))
            });
        } else {
            ranked.sort_by(|(a, sa), (b, sb)| {
                sb.total_cmp(sa).then_with(|| a.record_id.cmp(&b.record_id))
            });
        }

        let facets = compute_facets(ranked.iter().map(|(d, _)| *d));
        let total = ranked.len();
        let offset = (query.page as usize - 1).saturating_mul(query.size as usize);
        let hits = ranked
            .into_iter()
            .skip(offset)
            .take(query.size as usize)
            .map(|(d, s)| Hit {
                record_id: d.record_id.clone(),
                score: s,
                title: d.title.clone(),
                provider_key: d.provider_key.clone(),
                spatial: d.spatial,
                temporal: d.temporal,
                datestamp: d.datestamp,
            })
            .collect();
        Ok(SearchResult {
            total,
            page: query.page,
            size: query.size,
            hits,
            facets,
        })
    }
}
