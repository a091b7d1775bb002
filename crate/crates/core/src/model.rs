//! Canonical metadata record model.
//!
//! Every provider's XML is normalized into a [`MetadataRecord`]. The JSON
//! serialization of these types (snake_case fields, RFC 3339 UTC instants,
//! absent optionals omitted) is the wire form used by the journal and the
//! HTTP API.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::rfc3339;

/// Errors raised when constructing model values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid provider key {0:?}: must match [a-z0-9_-]+")]
    InvalidProviderKey(String),
    #[error("local identifier must not be empty")]
    EmptyIdentifier,
    #[error("{name} {value} out of range [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{0} is not a finite number")]
    NotFinite(&'static str),
    #[error("south {south} is greater than north {north}")]
    LatitudeOrder { south: f64, north: f64 },
    #[error("start {start} is after end {end}")]
    TemporalOrder {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
}

/// Globally unique record identifier of the form
/// `<provider_key>:<percent-encoded local identifier>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(String);

impl RecordId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Provider key portion (everything before the first `:`).
    pub fn provider_key(&self) -> &str {
        self.0.split_once(':').map_or(&self.0, |(p, _)| p)
    }

    /// Accept text already in canonical encoded form, as produced by
    /// [`make_record_id`].
    pub fn parse(text: &str) -> Option<RecordId> {
        let (key, encoded) = text.split_once(':')?;
        let local = percent_encoding::percent_decode_str(encoded).collect::<Vec<u8>>();
        let local = String::from_utf8(local).ok()?;
        make_record_id(key, &local).ok().filter(|id| id.0 == text)
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for RecordId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Returns true when `key` matches `[a-z0-9_-]+`.
pub fn is_valid_provider_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-')
}

/// Build the record id for a provider's local identifier.
///
/// Every byte outside `[A-Za-z0-9._-]` is replaced by `%XX` (uppercase hex).
pub fn make_record_id(provider_key: &str, local_identifier: &str) -> Result<RecordId, ModelError> {
    if !is_valid_provider_key(provider_key) {
        return Err(ModelError::InvalidProviderKey(provider_key.to_string()));
    }
    if local_identifier.is_empty() {
        return Err(ModelError::EmptyIdentifier);
    }
    let mut out = String::with_capacity(provider_key.len() + 1 + local_identifier.len());
    out.push_str(provider_key);
    out.push(':');
    for &b in local_identifier.as_bytes() {
        if is_unreserved(b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    Ok(RecordId(out))
}

/// Latitude/longitude bounding box in decimal degrees.
///
/// `west > east` is legal and denotes a box crossing the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialExtent {
    pub west: f64,
    pub east: f64,
    pub south: f64,
    pub north: f64,
}

impl SpatialExtent {
    pub fn crosses_antimeridian(&self) -> bool {
        self.west > self.east
    }

    /// Splits a crossing box into its two non-crossing halves.
    pub fn split(&self) -> Vec<SpatialExtent> {
        if self.crosses_antimeridian() {
            vec![
                SpatialExtent {
                    west: self.west,
                    east: 180.0,
                    ..*self
                },
                SpatialExtent {
                    west: -180.0,
                    east: self.east,
                    ..*self
                },
            ]
        } else {
            vec![*self]
        }
    }
}

/// Build a canonical [`SpatialExtent`] from raw limits.
///
/// Latitudes and longitudes out of range are errors, never clamped. A
/// zero-width non-crossing box sitting on the antimeridian (`west == east ==
/// ±180`) is canonicalized to `180`; everything else is preserved as given.
pub fn normalize_bbox(
    west: f64,
    south: f64,
    east: f64,
    north: f64,
) -> Result<SpatialExtent, ModelError> {
    for (name, v) in [
        ("west", west),
        ("south", south),
        ("east", east),
        ("north", north),
    ] {
        if !v.is_finite() {
            return Err(ModelError::NotFinite(name));
        }
    }
    for (name, v) in [("south", south), ("north", north)] {
        if v.abs() > 90.0 {
            return Err(ModelError::OutOfRange {
                name,
                value: v,
                min: -90.0,
                max: 90.0,
            });
        }
    }
    for (name, v) in [("west", west), ("east", east)] {
        if v.abs() > 180.0 {
            return Err(ModelError::OutOfRange {
                name,
                value: v,
                min: -180.0,
                max: 180.0,
            });
        }
    }
    if south > north {
        return Err(ModelError::LatitudeOrder { south, north });
    }
    // +0.0 for -0.0 keeps serialization stable
    let (mut west, mut east) = (west + 0.0, east + 0.0);
    if west == east && west.abs() == 180.0 {
        west = 180.0;
        east = 180.0;
    }
    Ok(SpatialExtent {
        west,
        east,
        south: south + 0.0,
        north: north + 0.0,
    })
}

/// Closed UTC time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalExtent {
    #[serde(with = "rfc3339")]
    pub start: DateTime<Utc>,
    #[serde(with = "rfc3339")]
    pub end: DateTime<Utc>,
}

impl TemporalExtent {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, ModelError> {
        if start > end {
            return Err(ModelError::TemporalOrder { start, end });
        }
        Ok(Self { start, end })
    }
}

/// A measured attribute: name, unit and free-text precision/accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub record_id: RecordId,
    pub provider_key: String,
    pub local_identifier: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub r#abstract: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub lineage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial: Option<SpatialExtent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalExtent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    #[serde(with = "rfc3339")]
    pub datestamp: DateTime<Utc>,
    #[serde(default)]
    pub deleted: bool,
}

/// A single broken invariant reported by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    RecordIdMismatch { expected: String, found: String },
    InvalidProviderKey,
    EmptyLocalIdentifier,
    EmptyTitle,
    EmptyKeyword { index: usize },
    DuplicateKeyword(String),
    EmptyAttributeName { index: usize },
    NonFiniteCoordinate,
    LatitudeRange,
    LongitudeRange,
    LatitudeOrder,
    TemporalOrder,
    InvalidSourceUrl(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RecordIdMismatch { expected, found } => {
                write!(f, "record_id = make_record_id(provider_key, local_identifier): expected {expected}, found {found}")
            }
            Violation::InvalidProviderKey => f.write_str("provider_key matches [a-z0-9_-]+"),
            Violation::EmptyLocalIdentifier => f.write_str("local_identifier nonempty"),
            Violation::EmptyTitle => f.write_str("title nonempty when deleted = false"),
            Violation::EmptyKeyword { index } => write!(f, "keyword {index} nonempty"),
            Violation::DuplicateKeyword(k) => write!(f, "keywords deduplicated: {k:?} repeated"),
            Violation::EmptyAttributeName { index } => write!(f, "attribute {index} name nonempty"),
            Violation::NonFiniteCoordinate => f.write_str("spatial coordinates finite"),
            Violation::LatitudeRange => f.write_str("latitudes within [-90, 90]"),
            Violation::LongitudeRange => f.write_str("longitudes within [-180, 180]"),
            Violation::LatitudeOrder => f.write_str("south ≤ north"),
            Violation::TemporalOrder => f.write_str("start ≤ end"),
            Violation::InvalidSourceUrl(u) => write!(f, "source_url is a URL: {u:?}"),
        }
    }
}

/// Check every record invariant, reporting all violations at once.
pub fn validate_record(record: MetadataRecord) -> Result<MetadataRecord, Vec<Violation>> {
    let mut violations = Vec::new();

    if !is_valid_provider_key(&record.provider_key) {
        violations.push(Violation::InvalidProviderKey);
    }
    if record.local_identifier.is_empty() {
        violations.push(Violation::EmptyLocalIdentifier);
    }
    if let Ok(expected) = make_record_id(&record.provider_key, &record.local_identifier) {
        if expected != record.record_id {
            violations.push(Violation::RecordIdMismatch {
                expected: expected.0,
                found: record.record_id.0.clone(),
            });
        }
    }
    if !record.deleted && record.title.trim().is_empty() {
        violations.push(Violation::EmptyTitle);
    }

    let mut seen = std::collections::HashSet::new();
    for (index, kw) in record.keywords.iter().enumerate() {
        if kw.trim().is_empty() {
            violations.push(Violation::EmptyKeyword { index });
        } else if !seen.insert(kw.as_str()) {
            violations.push(Violation::DuplicateKeyword(kw.clone()));
        }
    }
    for (index, attr) in record.attributes.iter().enumerate() {
        if attr.name.trim().is_empty() {
            violations.push(Violation::EmptyAttributeName { index });
        }
    }

    if let Some(s) = &record.spatial {
        if ![s.west, s.east, s.south, s.north]
            .iter()
            .all(|v| v.is_finite())
        {
            violations.push(Violation::NonFiniteCoordinate);
        } else {
            if s.south.abs() > 90.0 || s.north.abs() > 90.0 {
                violations.push(Violation::LatitudeRange);
            }
            if s.west.abs() > 180.0 || s.east.abs() > 180.0 {
                violations.push(Violation::LongitudeRange);
            }
            if s.south > s.north {
                violations.push(Violation::LatitudeOrder);
            }
        }
    }
    if let Some(t) = &record.temporal {
        if t.start > t.end {
            violations.push(Violation::TemporalOrder);
        }
    }
    if let Some(u) = &record.source_url {
        if url::Url::parse(u).is_err() {
            violations.push(Violation::InvalidSourceUrl(u.clone()));
        }
    }

    if violations.is_empty() {
        Ok(record)
    } else {
        Err(violations)
    }
}

/// Deduplicate keywords case-sensitively, dropping empties and keeping first
/// occurrence order.
pub fn dedup_keywords<I, S>(keywords: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for kw in keywords {
        let kw: String = kw.into();
        let kw = kw.trim().to_string();
        if !kw.is_empty() && seen.insert(kw.clone()) {
            out.push(kw);
        }
    }
    out
}

/// Tombstone payload: only the identity and the deletion datestamp survive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub record_id: RecordId,
    #[serde(with = "rfc3339")]
    pub datestamp: DateTime<Utc>,
}
