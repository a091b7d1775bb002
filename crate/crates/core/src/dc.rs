//! Dublin Core (`oai_dc`) payload parsing into draft records.
//!
//! Besides the fifteen unqualified DC elements, a small extension namespace
//! ([`PROFILE_NS`]) carries measured attributes and lineage prose:
//!
//! ```xml
//! <mh:attribute>
//!   <mh:name>soil_temperature</mh:name>
//!   <mh:unit>degC</mh:unit>
//!   <mh:precision>0.1</mh:precision>
//!   <mh:accuracy>±0.5 °C</mh:accuracy>
//! </mh:attribute>
//! <mh:lineage>Logged every 30 minutes by buried thermistors.</mh:lineage>
//! ```

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::model::{
    dedup_keywords, make_record_id, normalize_bbox, Attribute, MetadataRecord, ModelError,
    SpatialExtent, TemporalExtent,
};
use crate::oai::{RawRecord, DC_NS};
use crate::time::{parse_instant_or_date, DayBound};
use crate::xml::{self, Element, XmlError};

/// Namespace of the attribute/lineage extension elements.
pub const PROFILE_NS: &str = "urn:mercury-harvest:profile:1";

pub const WARN_MISSING_TITLE: &str = "missing title";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DcError {
    #[error("deleted record {0:?} has no metadata to parse")]
    DeletedRecord(String),
    #[error("metadata payload: {0}")]
    Xml(#[from] XmlError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoverageError {
    #[error("unrecognized coverage shape: {0}")]
    Shape(String),
    #[error("interval start is after end")]
    Order,
    #[error(transparent)]
    Range(ModelError),
}

/// A record parsed from a provider payload, before it is assigned to a
/// provider and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftRecord {
    pub local_identifier: String,
    pub title: String,
    pub r#abstract: String,
    pub keywords: Vec<String>,
    pub attributes: Vec<Attribute>,
    pub lineage: String,
    pub spatial: Option<SpatialExtent>,
    pub temporal: Option<TemporalExtent>,
    pub source_url: Option<String>,
    pub datestamp: DateTime<Utc>,
    pub deleted: bool,
    pub parse_warnings: Vec<String>,
}

impl DraftRecord {
    /// Attach provider identity, producing an (unvalidated) canonical record.
    pub fn into_record(self, provider_key: &str) -> Result<MetadataRecord, ModelError> {
        Ok(MetadataRecord {
            record_id: make_record_id(provider_key, &self.local_identifier)?,
            provider_key: provider_key.to_string(),
            local_identifier: self.local_identifier,
            title: self.title,
            r#abstract: self.r#abstract,
            keywords: self.keywords,
            attributes: self.attributes,
            lineage: self.lineage,
            spatial: self.spatial,
            temporal: self.temporal,
            source_url: self.source_url,
            datestamp: self.datestamp,
            deleted: self.deleted,
        })
    }
}

#[derive(Default)]
struct Collected {
    titles: Vec<String>,
    descriptions: Vec<String>,
    subjects: Vec<String>,
    coverages: Vec<String>,
    url_candidates: Vec<String>,
    attributes: Vec<Attribute>,
    lineage: Vec<String>,
    warnings: Vec<String>,
}

fn collect(el: &Element, out: &mut Collected) {
    match el.namespace.as_deref() {
        Some(DC_NS) => {
            let text = el.text().trim().to_string();
            match el.local.as_str() {
                "title" => out.titles.push(text),
                "description" if !text.is_empty() => out.descriptions.push(text),
                "subject" => out.subjects.push(text),
                "coverage" if !text.is_empty() => out.coverages.push(text),
                "source" | "identifier" if !text.is_empty() => out.url_candidates.push(text),
                _ => {}
            }
            return;
        }
        Some(PROFILE_NS) => match el.local.as_str() {
            "attribute" => {
                let field = |name: &str| {
                    el.child(name)
                        .map(|c| c.text().trim().to_string())
                        .filter(|s| !s.is_empty())
                };
                match field("name") {
                    Some(name) => out.attributes.push(Attribute {
                        name,
                        unit: field("unit").unwrap_or_default(),
                        precision: field("precision"),
                        accuracy: field("accuracy"),
                    }),
                    None => out.warnings.push(format!(
                        "attribute {} has no name; dropped",
                        out.attributes.len() + 1
                    )),
                }
                return;
            }
            "lineage" => {
                let text = el.text().trim().to_string();
                if !text.is_empty() {
                    out.lineage.push(text);
                }
                return;
            }
            _ => {}
        },
        _ => {}
    }
    for child in el.elements() {
        collect(child, out);
    }
}

fn is_url_shaped(s: &str) -> bool {
    matches!(
        url::Url::parse(s),
        Ok(u) if matches!(u.scheme(), "http" | "https" | "ftp") && u.has_host()
    )
}

fn looks_spatial(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    ["northlimit", "southlimit", "westlimit", "eastlimit"]
        .iter()
        .any(|n| lower.contains(n))
}

/// Parse a record's DC payload into a draft. Never fails on well-formed XML;
/// problems with individual fields become warnings.
pub fn parse_record(raw: &RawRecord) -> Result<DraftRecord, DcError> {
    let xml_text = match (&raw.metadata_xml, raw.deleted) {
        (Some(x), false) => x,
        _ => return Err(DcError::DeletedRecord(raw.identifier.clone())),
    };
    let root = xml::parse_document(xml_text)?;
    let mut c = Collected::default();
    collect(&root, &mut c);

    let mut warnings = std::mem::take(&mut c.warnings);
    let mut titles = c.titles.into_iter();
    let title = match titles.next() {
        Some(t) if !t.is_empty() => t,
        _ => {
            warnings.insert(0, WARN_MISSING_TITLE.to_string());
            String::new()
        }
    };
    for extra in titles {
        warnings.push(format!("additional title ignored: {extra:?}"));
    }

    let mut spatial = None;
    let mut temporal = None;
    for cov in &c.coverages {
        if looks_spatial(cov) {
            match parse_spatial(cov) {
                Ok(b) if spatial.is_none() => spatial = Some(b),
                Ok(_) => warnings.push(format!("additional spatial coverage ignored: {cov:?}")),
                Err(e) => warnings.push(format!("spatial coverage {cov:?} dropped: {e}")),
            }
        } else {
            match parse_temporal(cov) {
                Ok(t) if temporal.is_none() => temporal = Some(t),
                Ok(_) => warnings.push(format!("additional temporal coverage ignored: {cov:?}")),
                Err(CoverageError::Shape(_)) => {
                    warnings.push(format!("unrecognized coverage kept out: {cov:?}"))
                }
                Err(e) => warnings.push(format!("temporal coverage {cov:?} dropped: {e}")),
            }
        }
    }

    Ok(DraftRecord {
        local_identifier: raw.identifier.clone(),
        title,
        r#abstract: c.descriptions.join("\n\n"),
        keywords: dedup_keywords(c.subjects),
        attributes: c.attributes,
        lineage: c.lineage.join("\n\n"),
        spatial,
        temporal,
        source_url: c.url_candidates.into_iter().find(|u| is_url_shaped(u)),
        datestamp: raw.datestamp,
        deleted: false,
        parse_warnings: warnings,
    })
}

fn name_value_pairs(text: &str) -> Vec<(String, String)> {
    text.split(';')
        .filter_map(|part| {
            let (k, v) = part.split_once('=')?;
            Some((k.trim().to_ascii_lowercase(), v.trim().to_string()))
        })
        .collect()
}

/// Parse a temporal coverage value.
///
/// Accepted shapes: `start/end`, a single date, or `start=...; end=...;`.
/// Bare dates expand to whole days (`00:00:00Z` to `23:59:59Z`).
pub fn parse_temporal(text: &str) -> Result<TemporalExtent, CoverageError> {
    let text = text.trim();
    let shape = || CoverageError::Shape(text.to_string());

    let pairs = name_value_pairs(text);
    let (start, end) = if text.contains('=') {
        let get = |n: &str| pairs.iter().find(|(k, _)| k == n).map(|(_, v)| v.as_str());
        (
            get("start").ok_or_else(shape)?,
            get("end").ok_or_else(shape)?,
        )
    } else if let Some((a, b)) = text.split_once('/') {
        (a, b)
    } else {
        (text, text)
    };
    let start = parse_instant_or_date(start, DayBound::Start).ok_or_else(shape)?;
    let end = parse_instant_or_date(end, DayBound::End).ok_or_else(shape)?;
    TemporalExtent::new(start, end).map_err(|_| CoverageError::Order)
}

/// Parse a DCMI-Box style `northlimit=..; southlimit=..; westlimit=..;
/// eastlimit=..` value. Names are case-insensitive, order is free and extra
/// pairs are ignored.
pub fn parse_spatial(text: &str) -> Result<SpatialExtent, CoverageError> {
    let pairs = name_value_pairs(text);
    let mut missing = Vec::new();
    let mut limit = |name: &'static str| -> Result<f64, CoverageError> {
        match pairs.iter().find(|(k, _)| k == name) {
            Some((_, v)) => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CoverageError::Shape(format!("{name} is not a number: {v:?}"))),
            None => {
                missing.push(name);
                Ok(f64::NAN)
            }
        }
    };
    let north = limit("northlimit")?;
    let south = limit("southlimit")?;
    let west = limit("westlimit")?;
    let east = limit("eastlimit")?;
    if !missing.is_empty() {
        return Err(CoverageError::Shape(format!(
            "missing {}",
            missing.join(", ")
        )));
    }
    normalize_bbox(west, south, east, north).map_err(CoverageError::Range)
}
