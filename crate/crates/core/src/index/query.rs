//! Search requests and their textual parameter form.
//!
//! The HTTP API and the CLI both go through [`SearchParams::to_query`] and
//! [`search_json`], so identical parameters always give identical bytes.

use chrono::{DateTime, Utc};
use serde::Serialize;

use super::{Index, IndexError, MAX_PAGE_SIZE};
use crate::model::{normalize_bbox, SpatialExtent, TemporalExtent};
use crate::time::{parse_instant_or_date, DayBound};

pub const DEFAULT_PAGE_SIZE: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub terms_text: String,
    pub bbox: Option<SpatialExtent>,
    pub interval: Option<TemporalExtent>,
    pub provider_filter: Option<String>,
    pub keyword_filter: Option<String>,
    pub page: u32,
    pub size: u32,
}

impl Default for Query {
    fn default() -> Self {
        Self {
            terms_text: String::new(),
            bbox: None,
            interval: None,
            provider_filter: None,
            keyword_filter: None,
            page: 1,
            size: DEFAULT_PAGE_SIZE,
        }
    }
}

impl Query {
    pub fn is_browse(&self) -> bool {
        super::tokenize(&self.terms_text).is_empty()
    }
}

/// A rejected search parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamError {
    pub param: &'static str,
    pub code: &'static str,
    pub message: String,
}

impl std::fmt::Display for ParamError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "parameter {}: {}", self.param, self.message)
    }
}

impl std::error::Error for ParamError {}

/// Raw search parameters as they arrive from a query string or CLI flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchParams {
    pub q: Option<String>,
    pub bbox: Option<String>,
    pub start: Option<String>,
    pub end: Option<String>,
    pub provider: Option<String>,
    pub keyword: Option<String>,
    pub page: Option<String>,
    pub size: Option<String>,
}

fn nonempty(v: &Option<String>) -> Option<&str> {
    v.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

impl SearchParams {
    /// Collect known parameters from decoded key/value pairs. The first
    /// occurrence of a repeated key wins; unknown keys are ignored.
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        let mut p = SearchParams::default();
        for (k, v) in pairs {
            let slot = match k.as_ref() {
                "q" => &mut p.q,
                "bbox" => &mut p.bbox,
                "start" => &mut p.start,
                "end" => &mut p.end,
                "provider" => &mut p.provider,
                "keyword" => &mut p.keyword,
                "page" => &mut p.page,
                "size" => &mut p.size,
                _ => continue,
            };
            if slot.is_none() {
                *slot = Some(v.into());
            }
        }
        p
    }

    pub fn to_query(&self) -> Result<Query, ParamError> {
        let mut query = Query {
            terms_text: self.q.clone().unwrap_or_default(),
            ..Query::default()
        };

        if let Some(b) = nonempty(&self.bbox) {
            query.bbox = Some(parse_bbox(b)?);
        }

        let start = nonempty(&self.start)
            .map(|s| {
                parse_instant_or_date(s, DayBound::Start).ok_or_else(|| ParamError {
                    param: "start",
                    code: "bad_start",
                    message: format!("expected RFC 3339 instant or YYYY-MM-DD, got {s:?}"),
                })
            })
            .transpose()?;
        let end = nonempty(&self.end)
            .map(|s| {
                parse_instant_or_date(s, DayBound::End).ok_or_else(|| ParamError {
                    param: "end",
                    code: "bad_end",
                    message: format!("expected RFC 3339 instant or YYYY-MM-DD, got {s:?}"),
                })
            })
            .transpose()?;
        if start.is_some() || end.is_some() {
            let start = start.unwrap_or(DateTime::<Utc>::MIN_UTC);
            let end = end.unwrap_or(DateTime::<Utc>::MAX_UTC);
            query.interval = Some(TemporalExtent::new(start, end).map_err(|_| ParamError {
                param: "end",
                code: "bad_interval",
                message: "start is after end".into(),
            })?);
        }

        query.provider_filter = nonempty(&self.provider).map(str::to_string);
        query.keyword_filter = nonempty(&self.keyword).map(str::to_string);

        if let Some(p) = nonempty(&self.page) {
            query.page = p
                .parse::<u32>()
                .ok()
                .filter(|&p| p >= 1)
                .ok_or_else(|| ParamError {
                    param: "page",
                    code: "bad_page",
                    message: format!("page must be an integer ≥ 1, got {p:?}"),
                })?;
        }
        if let Some(s) = nonempty(&self.size) {
            query.size = s
                .parse::<u32>()
                .ok()
                .filter(|s| (1..=MAX_PAGE_SIZE).contains(s))
                .ok_or_else(|| ParamError {
                    param: "size",
                    code: "bad_size",
                    message: format!("size must be an integer in [1, {MAX_PAGE_SIZE}], got {s:?}"),
                })?;
        }
        Ok(query)
    }
}

/// Parse `west,south,east,north`.
pub fn parse_bbox(text: &str) -> Result<SpatialExtent, ParamError> {
    let err = |message: String| ParamError {
        param: "bbox",
        code: "bad_bbox",
        message,
    };
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(err(format!(
            "expected west,south,east,north (4 numbers), got {} value(s)",
            parts.len()
        )));
    }
    let mut v = [0f64; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .map_err(|_| err(format!("{p:?} is not a number")))?;
    }
    normalize_bbox(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))
}

impl From<IndexError> for ParamError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::BadPage => ParamError {
                param: "page",
                code: "bad_page",
                message: e.to_string(),
            },
            _ => ParamError {
                param: "size",
                code: "bad_size",
                message: e.to_string(),
            },
        }
    }
}

/// Parse, search and serialize: the single code path behind both the
/// `/api/search` body and `search --json`.
pub fn search_json(index: &Index, params: &SearchParams) -> Result<String, ParamError> {
    let query = params.to_query()?;
    let result = index.search(&query)?;
    Ok(serde_json::to_string(&result).expect("search results serialize"))
}
