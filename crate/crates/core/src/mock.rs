//! A synthetic OAI-PMH 2.0 data provider.
//!
//! [`MockProvider`] answers query strings with complete OAI-PMH responses
//! built from a [`MockCorpus`]. It is transport-agnostic: the server crate
//! puts it behind HTTP, and it also implements [`Transport`] directly so
//! harvests can run in-process in tests.
//!
//! Resumption tokens are plain text of the form
//! `<offset>:<crc32c of filter, 8 hex>:<filter>` where the filter is
//! `<verb>|<metadataPrefix>|<from>|<until>`. Carrying the filter inside the
//! token keeps the provider stateless between requests.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use chrono::{DateTime, Duration as ChronoDuration, TimeZone, Utc};
use parking_lot::RwLock;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dc::PROFILE_NS;
use crate::harvest::{HttpResponse, Transport};
use crate::model::Attribute;
use crate::oai::{
    check_arguments, Argument, IdentifyInfo, MetadataFormat, OaiEnvelope, OaiError, OaiErrorCode,
    Payload, RawRecord, RecordHeader, RequestEcho, ResumptionToken, Verb, DC_NS, OAI_DC_NS, OAI_NS,
    OAI_SCHEMA_LOCATION, XSI_NS,
};
use crate::time::{self, format_instant, parse_date, rfc3339, Granularity};
use crate::xml::{escape_attr, escape_text};

pub const OAI_DC_SCHEMA: &str = "http://www.openarchives.org/OAI/2.0/oai_dc.xsd";
pub const DEFAULT_BASE_URL: &str = "http://localhost/oai";

/// Dublin Core plus profile fields of one mock record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcPayload {
    pub titles: Vec<String>,
    pub descriptions: Vec<String>,
    pub subjects: Vec<String>,
    /// Raw `dc:coverage` values, spatial (`northlimit=...`) or temporal.
    pub coverages: Vec<String>,
    pub identifiers: Vec<String>,
    pub sources: Vec<String>,
    pub attributes: Vec<Attribute>,
    pub lineage: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRecord {
    pub local_identifier: String,
    #[serde(with = "rfc3339")]
    pub datestamp: DateTime<Utc>,
    #[serde(default)]
    pub deleted: bool,
    #[serde(default)]
    pub payload: DcPayload,
    /// Verbatim metadata element used instead of rendering `payload`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_metadata: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// Answer the first request for this ListRecords page (1-based) with 503.
    pub fail_page_once: Option<u64>,
    /// `Retry-After` seconds sent with that 503.
    pub retry_after: Option<u64>,
    /// Reject the first resumption token for a page beyond this many pages.
    pub expire_token_after: Option<u64>,
}

fn default_page_size() -> usize {
    10
}

fn default_repository_name() -> String {
    "Mercury mock provider".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockCorpus {
    #[serde(default = "default_repository_name")]
    pub repository_name: String,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub fault_plan: FaultPlan,
    pub records: Vec<MockRecord>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("page_size must be at least 1")]
    PageSize,
    #[error("empty local_identifier at record {0}")]
    EmptyIdentifier(usize),
    #[error("duplicate local_identifier {0:?}")]
    Duplicate(String),
    #[error("datestamp of {0:?} is not at day granularity")]
    Granularity(String),
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse corpus {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

impl MockCorpus {
    pub fn new(records: Vec<MockRecord>, page_size: usize, granularity: Granularity) -> Self {
        Self {
            repository_name: default_repository_name(),
            page_size,
            granularity,
            fault_plan: FaultPlan::default(),
            records,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.page_size == 0 {
            return Err(CorpusError::PageSize);
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.local_identifier.is_empty() {
                return Err(CorpusError::EmptyIdentifier(i));
            }
            if !seen.insert(r.local_identifier.as_str()) {
                return Err(CorpusError::Duplicate(r.local_identifier.clone()));
            }
            if self.granularity == Granularity::Day && r.datestamp != day_floor(r.datestamp) {
                return Err(CorpusError::Granularity(r.local_identifier.clone()));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: shown.clone(),
            source,
        })?;
        let corpus: MockCorpus =
            serde_json::from_slice(&bytes).map_err(|source| CorpusError::Json {
                path: shown,
                source,
            })?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn live(&self) -> impl Iterator<Item = &MockRecord> {
        self.records.iter().filter(|r| !r.deleted)
    }

    pub fn max_datestamp(&self) -> Option<DateTime<Utc>> {
        self.records.iter().map(|r| r.datestamp).max()
    }

    /// The record as a harvester would receive it.
    pub fn raw_record(&self, r: &MockRecord) -> RawRecord {
        RawRecord {
            identifier: r.local_identifier.clone(),
            datestamp: r.datestamp,
            set_specs: Vec::new(),
            deleted: r.deleted,
            metadata_xml: (!r.deleted).then(|| {
                r.raw_metadata
                    .clone()
                    .unwrap_or_else(|| render_payload(&r.payload))
            }),
        }
    }
}

fn day_floor(t: DateTime<Utc>) -> DateTime<Utc> {
    time::start_of_day(t.date_naive())
}

/// Characters XML 1.0 cannot carry are replaced so any payload text emits
/// as well-formed XML.
fn xml_safe(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| match c {
            '\t' | '\n' => c,
            '\r' => '\n',
            c if (c as u32) < 0x20 || c == '\u{FFFE}' || c == '\u{FFFF}' => '\u{FFFD}',
            c => c,
        })
        .collect();
    escape_text(&cleaned)
}

/// Render a payload as an `oai_dc:dc` element with profile extensions.
pub fn render_payload(p: &DcPayload) -> String {
    let mut out = format!(
        "<oai_dc:dc xmlns:oai_dc=\"{OAI_DC_NS}\" xmlns:dc=\"{DC_NS}\" xmlns:mh=\"{PROFILE_NS}\">"
    );
    let mut dc = |name: &str, values: &[String]| {
        for v in values {
            out.push_str(&format!("<dc:{name}>{}</dc:{name}>", xml_safe(v)));
        }
    };
    dc("title", &p.titles);
    dc("description", &p.descriptions);
    dc("subject", &p.subjects);
    dc("coverage", &p.coverages);
    dc("identifier", &p.identifiers);
    dc("source", &p.sources);
    for a in &p.attributes {
        out.push_str("<mh:attribute>");
        out.push_str(&format!("<mh:name>{}</mh:name>", xml_safe(&a.name)));
        if !a.unit.is_empty() {
            out.push_str(&format!("<mh:unit>{}</mh:unit>", xml_safe(&a.unit)));
        }
        if let Some(v) = &a.precision {
            out.push_str(&format!("<mh:precision>{}</mh:precision>", xml_safe(v)));
        }
        if let Some(v) = &a.accuracy {
            out.push_str(&format!("<mh:accuracy>{}</mh:accuracy>", xml_safe(v)));
        }
        out.push_str("</mh:attribute>");
    }
    for l in &p.lineage {
        out.push_str(&format!("<mh:lineage>{}</mh:lineage>", xml_safe(l)));
    }
    out.push_str("</oai_dc:dc>");
    out
}

fn emit_header(out: &mut String, h: &RecordHeader, granularity: Granularity) {
    if h.deleted {
        out.push_str("<header status=\"deleted\">");
    } else {
        out.push_str("<header>");
    }
    out.push_str(&format!(
        "<identifier>{}</identifier><datestamp>{}</datestamp>",
        xml_safe(&h.identifier),
        granularity.format(h.datestamp)
    ));
    for s in &h.set_specs {
        out.push_str(&format!("<setSpec>{}</setSpec>", xml_safe(s)));
    }
    out.push_str("</header>");
}

fn emit_record(out: &mut String, r: &RawRecord, granularity: Granularity) {
    out.push_str("<record>");
    emit_header(out, &r.header(), granularity);
    if let (false, Some(m)) = (r.deleted, &r.metadata_xml) {
        out.push_str("<metadata>");
        out.push_str(m);
        out.push_str("</metadata>");
    }
    out.push_str("</record>");
}

fn emit_token(out: &mut String, t: &ResumptionToken) {
    out.push_str("<resumptionToken");
    if let Some(n) = t.complete_list_size {
        out.push_str(&format!(" completeListSize=\"{n}\""));
    }
    if let Some(c) = t.cursor {
        out.push_str(&format!(" cursor=\"{c}\""));
    }
    if t.token.is_empty() {
        out.push_str("/>");
    } else {
        out.push_str(&format!(">{}</resumptionToken>", xml_safe(&t.token)));
    }
}

/// Serialize an envelope as an OAI-PMH response document. Record
/// datestamps use `granularity`; a resumption token with empty text is
/// written as the empty element that closes a multi-page list.
pub fn emit_envelope(env: &OaiEnvelope, granularity: Granularity) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<OAI-PMH xmlns=\"{OAI_NS}\" xmlns:xsi=\"{XSI_NS}\" xsi:schemaLocation=\"{OAI_SCHEMA_LOCATION}\">\n"
    ));
    out.push_str(&format!(
        "<responseDate>{}</responseDate>\n",
        format_instant(env.response_date)
    ));
    out.push_str("<request");
    for (k, v) in &env.request_echo.attributes {
        out.push_str(&format!(" {k}=\"{}\"", escape_attr(v)));
    }
    out.push_str(&format!(
        ">{}</request>\n",
        xml_safe(&env.request_echo.base_url)
    ));

    let list_token = |out: &mut String| {
        if let Some(t) = &env.resumption {
            emit_token(out, t);
        }
    };
    match &env.payload {
        Payload::Error(e) => {
            out.push_str(&format!(
                "<error code=\"{}\">{}</error>",
                e.code.as_str(),
                xml_safe(&e.message)
            ));
        }
        Payload::Identify(i) => {
            out.push_str("<Identify>");
            out.push_str(&format!(
                "<repositoryName>{}</repositoryName>",
                xml_safe(&i.repository_name)
            ));
            out.push_str(&format!("<baseURL>{}</baseURL>", xml_safe(&i.base_url)));
            out.push_str(&format!(
                "<protocolVersion>{}</protocolVersion>",
                xml_safe(&i.protocol_version)
            ));
            for a in &i.admin_emails {
                out.push_str(&format!("<adminEmail>{}</adminEmail>", xml_safe(a)));
            }
            out.push_str(&format!(
                "<earliestDatestamp>{}</earliestDatestamp>",
                i.granularity.format(i.earliest_datestamp)
            ));
            out.push_str(&format!(
                "<deletedRecord>{}</deletedRecord>",
                xml_safe(&i.deleted_record)
            ));
            out.push_str(&format!(
                "<granularity>{}</granularity>",
                i.granularity.pattern()
            ));
            out.push_str("</Identify>");
        }
        Payload::Formats(formats) => {
            out.push_str("<ListMetadataFormats>");
            for f in formats {
                out.push_str(&format!(
                    "<metadataFormat><metadataPrefix>{}</metadataPrefix><schema>{}</schema>\
                     <metadataNamespace>{}</metadataNamespace></metadataFormat>",
                    xml_safe(&f.prefix),
                    xml_safe(&f.schema),
                    xml_safe(&f.namespace)
                ));
            }
            list_token(&mut out);
            out.push_str("</ListMetadataFormats>");
        }
        Payload::Sets(sets) => {
            out.push_str("<ListSets>");
            for s in sets {
                out.push_str(&format!(
                    "<set><setSpec>{}</setSpec><setName>{}</setName></set>",
                    xml_safe(&s.spec),
                    xml_safe(&s.name)
                ));
            }
            list_token(&mut out);
            out.push_str("</ListSets>");
        }
        Payload::Headers(headers) => {
            out.push_str("<ListIdentifiers>");
            for h in headers {
                emit_header(&mut out, h, granularity);
            }
            list_token(&mut out);
            out.push_str("</ListIdentifiers>");
        }
        Payload::Records(records) => {
            out.push_str("<ListRecords>");
            for r in records {
                emit_record(&mut out, r, granularity);
            }
            list_token(&mut out);
            out.push_str("</ListRecords>");
        }
        Payload::Record(r) => {
            out.push_str("<GetRecord>");
            emit_record(&mut out, r, granularity);
            out.push_str("</GetRecord>");
        }
    }
    out.push_str("\n</OAI-PMH>\n");
    out
}

/// One HTTP-level answer from the mock provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockResponse {
    pub status: u16,
    pub retry_after: Option<u64>,
    pub body: String,
}

impl MockResponse {
    pub fn content_type(&self) -> &'static str {
        if self.status == 200 {
            "text/xml; charset=utf-8"
        } else {
            "text/plain; charset=utf-8"
        }
    }
}

/// The listing a token continues.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ListFilter {
    verb: Verb,
    prefix: String,
    from: String,
    until: String,
}

impl ListFilter {
    fn text(&self) -> String {
        format!("{}|{}|{}|{}", self.verb, self.prefix, self.from, self.until)
    }

    fn parse(text: &str) -> Option<Self> {
        let mut parts = text.split('|');
        let f = ListFilter {
            verb: parts.next()?.parse().ok()?,
            prefix: parts.next()?.to_string(),
            from: parts.next()?.to_string(),
            until: parts.next()?.to_string(),
        };
        parts.next().is_none().then_some(f)
    }
}

pub fn encode_token(offset: usize, filter_text: &str) -> String {
    format!(
        "{offset}:{:08x}:{filter_text}",
        crc32c::crc32c(filter_text.as_bytes())
    )
}

/// Split a token into offset and filter text, checking the hash.
pub fn decode_token(token: &str) -> Option<(usize, String)> {
    let mut parts = token.splitn(3, ':');
    let offset = parts.next()?.parse().ok()?;
    let hash = parts.next()?;
    let filter = parts.next()?;
    (hash == format!("{:08x}", crc32c::crc32c(filter.as_bytes())))
        .then(|| (offset, filter.to_string()))
}

type Reply = Result<(Payload, Option<ResumptionToken>), OaiError>;

fn oai_err(code: OaiErrorCode, message: impl Into<String>) -> OaiError {
    OaiError {
        code,
        message: message.into(),
    }
}

/// A running mock provider: an updatable corpus plus fault-plan counters.
#[derive(Debug)]
pub struct MockProvider {
    corpus: RwLock<MockCorpus>,
    base_url: RwLock<String>,
    fired_503: AtomicBool,
    fired_expiry: AtomicBool,
    requests: AtomicU64,
}

impl MockProvider {
    pub fn new(corpus: MockCorpus) -> Self {
        Self {
            corpus: RwLock::new(corpus),
            base_url: RwLock::new(DEFAULT_BASE_URL.to_string()),
            fired_503: AtomicBool::new(false),
            fired_expiry: AtomicBool::new(false),
            requests: AtomicU64::new(0),
        }
    }

    /// Base URL echoed in responses.
    pub fn set_base_url(&self, url: impl Into<String>) {
        *self.base_url.write() = url.into();
    }

    pub fn base_url(&self) -> String {
        self.base_url.read().clone()
    }

    pub fn corpus(&self) -> MockCorpus {
        self.corpus.read().clone()
    }

    /// Change the corpus in place, e.g. between two harvests.
    pub fn update<R>(&self, f: impl FnOnce(&mut MockCorpus) -> R) -> R {
        f(&mut self.corpus.write())
    }

    /// Arm the fault plan again.
    pub fn reset_faults(&self) {
        self.fired_503.store(false, Ordering::SeqCst);
        self.fired_expiry.store(false, Ordering::SeqCst);
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Answer one request given its raw (still percent-encoded) query string.
    pub fn respond(&self, query: &str) -> MockResponse {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let corpus = self.corpus.read();
        let pairs: Vec<(String, String)> = url::form_urlencoded::parse(query.as_bytes())
            .into_owned()
            .collect();

        let mut echo = RequestEcho {
            base_url: self.base_url(),
            attributes: Vec::new(),
        };
        let response_date = corpus
            .max_datestamp()
            .unwrap_or_else(|| Utc.timestamp_opt(0, 0).unwrap());
        let envelope = |echo: RequestEcho, reply: Reply| {
            let (payload, resumption) = match reply {
                Ok(x) => x,
                Err(e) => (Payload::Error(e), None),
            };
            let env = OaiEnvelope {
                response_date,
                request_echo: echo,
                payload,
                resumption,
            };
            MockResponse {
                status: 200,
                retry_after: None,
                body: emit_envelope(&env, corpus.granularity),
            }
        };

        let verbs: Vec<&str> = pairs
            .iter()
            .filter(|(k, _)| k == "verb")
            .map(|(_, v)| v.as_str())
            .collect();
        let verb = match verbs.as_slice() {
            [v] => match v.parse::<Verb>() {
                Ok(v) => v,
                Err(()) => {
                    return envelope(
                        echo,
                        Err(oai_err(
                            OaiErrorCode::BadVerb,
                            format!("illegal verb {v:?}"),
                        )),
                    )
                }
            },
            [] => {
                return envelope(
                    echo,
                    Err(oai_err(OaiErrorCode::BadVerb, "missing verb argument")),
                )
            }
            _ => {
                return envelope(
                    echo,
                    Err(oai_err(OaiErrorCode::BadVerb, "repeated verb argument")),
                )
            }
        };
        let mut args = Vec::new();
        for (k, v) in pairs.iter().filter(|(k, _)| k != "verb") {
            match k.parse::<Argument>() {
                Ok(a) => args.push((a, v.clone())),
                Err(()) => {
                    return envelope(
                        echo,
                        Err(oai_err(
                            OaiErrorCode::BadArgument,
                            format!("illegal argument {k:?}"),
                        )),
                    )
                }
            }
        }
        if let Err(e) = check_arguments(verb, &args) {
            return envelope(echo, Err(oai_err(OaiErrorCode::BadArgument, e.to_string())));
        }
        echo.attributes.push(("verb".into(), verb.as_str().into()));
        for (a, v) in &args {
            echo.attributes.push((a.as_str().into(), v.clone()));
        }
        let arg = |a: Argument| args.iter().find(|(b, _)| *b == a).map(|(_, v)| v.as_str());

        let reply: Reply = match verb {
            Verb::Identify => Ok((Payload::Identify(self.identify(&corpus)), None)),
            Verb::ListMetadataFormats => match arg(Argument::Identifier) {
                Some(id) if !corpus.records.iter().any(|r| r.local_identifier == id) => Err(
                    oai_err(OaiErrorCode::IdDoesNotExist, format!("no record {id:?}")),
                ),
                _ => Ok((Payload::Formats(vec![oai_dc_format()]), None)),
            },
            Verb::ListSets => Err(oai_err(
                OaiErrorCode::NoSetHierarchy,
                "this repository has no sets",
            )),
            Verb::GetRecord => {
                let id = arg(Argument::Identifier).unwrap_or_default();
                let prefix = arg(Argument::MetadataPrefix).unwrap_or_default();
                if prefix != "oai_dc" {
                    Err(oai_err(
                        OaiErrorCode::CannotDisseminateFormat,
                        format!("format {prefix:?} not supported"),
                    ))
                } else {
                    match corpus.records.iter().find(|r| r.local_identifier == id) {
                        Some(r) => Ok((Payload::Record(corpus.raw_record(r)), None)),
                        None => Err(oai_err(
                            OaiErrorCode::IdDoesNotExist,
                            format!("no record {id:?}"),
                        )),
                    }
                }
            }
            Verb::ListRecords | Verb::ListIdentifiers => match self.list(&corpus, verb, &args) {
                Ok(ListOutcome::Page(payload, token)) => Ok((payload, token)),
                Ok(ListOutcome::Unavailable) => {
                    let retry_after = corpus.fault_plan.retry_after.unwrap_or(1);
                    return MockResponse {
                        status: 503,
                        retry_after: Some(retry_after),
                        body: "service temporarily unavailable\n".into(),
                    };
                }
                Err(e) => Err(e),
            },
        };
        envelope(echo, reply)
    }

    fn identify(&self, corpus: &MockCorpus) -> IdentifyInfo {
        IdentifyInfo {
            repository_name: corpus.repository_name.clone(),
            base_url: self.base_url(),
            protocol_version: "2.0".into(),
            admin_emails: vec!["admin@example.org".into()],
            earliest_datestamp: corpus
                .records
                .iter()
                .map(|r| r.datestamp)
                .min()
                .unwrap_or_else(|| Utc.timestamp_opt(0, 0).unwrap()),
            deleted_record: "persistent".into(),
            granularity: corpus.granularity,
        }
    }

    fn list(
        &self,
        corpus: &MockCorpus,
        verb: Verb,
        args: &[(Argument, String)],
    ) -> Result<ListOutcome, OaiError> {
        let arg = |a: Argument| args.iter().find(|(b, _)| *b == a).map(|(_, v)| v.clone());
        let bad_token = || {
            oai_err(
                OaiErrorCode::BadResumptionToken,
                "invalid or expired resumption token",
            )
        };

        let resumed = arg(Argument::ResumptionToken);
        let (filter, offset) = match &resumed {
            Some(t) => {
                let (offset, text) = decode_token(t).ok_or_else(bad_token)?;
                let filter = ListFilter::parse(&text).ok_or_else(bad_token)?;
                if filter.verb != verb || offset == 0 || offset % corpus.page_size != 0 {
                    return Err(bad_token());
                }
                (filter, offset)
            }
            None => {
                if arg(Argument::Set).is_some() {
                    return Err(oai_err(
                        OaiErrorCode::NoSetHierarchy,
                        "this repository has no sets",
                    ));
                }
                let filter = ListFilter {
                    verb,
                    prefix: arg(Argument::MetadataPrefix).unwrap_or_default(),
                    from: arg(Argument::From).unwrap_or_default(),
                    until: arg(Argument::Until).unwrap_or_default(),
                };
                (filter, 0)
            }
        };
        if filter.prefix != "oai_dc" {
            return Err(oai_err(
                OaiErrorCode::CannotDisseminateFormat,
                format!("format {:?} not supported", filter.prefix),
            ));
        }
        let from = parse_bound(&filter.from, corpus.granularity, false)?;
        let until = parse_bound(&filter.until, corpus.granularity, true)?;
        if !filter.from.is_empty() && !filter.until.is_empty() {
            if filter.from.len() != filter.until.len() {
                return Err(oai_err(
                    OaiErrorCode::BadArgument,
                    "from and until differ in granularity",
                ));
            }
            if from > until {
                return Err(oai_err(
                    OaiErrorCode::BadArgument,
                    "from is later than until",
                ));
            }
        }

        let matching: Vec<&MockRecord> = corpus
            .records
            .iter()
            .filter(|r| {
                from.is_none_or(|f| r.datestamp >= f) && until.is_none_or(|u| r.datestamp <= u)
            })
            .collect();
        if matching.is_empty() {
            return Err(oai_err(
                OaiErrorCode::NoRecordsMatch,
                "no records match the request",
            ));
        }
        if offset >= matching.len() {
            return Err(bad_token());
        }

        let page_no = (offset / corpus.page_size) as u64 + 1;
        let plan = &corpus.fault_plan;
        if verb == Verb::ListRecords
            && plan.fail_page_once == Some(page_no)
            && !self.fired_503.swap(true, Ordering::SeqCst)
        {
            return Ok(ListOutcome::Unavailable);
        }
        if resumed.is_some()
            && plan.expire_token_after.is_some_and(|k| page_no > k)
            && !self.fired_expiry.swap(true, Ordering::SeqCst)
        {
            return Err(bad_token());
        }

        let end = (offset + corpus.page_size).min(matching.len());
        let page = &matching[offset..end];
        let total = matching.len() as u64;
        let token = if end < matching.len() {
            Some(ResumptionToken {
                token: encode_token(end, &filter.text()),
                complete_list_size: Some(total),
                cursor: Some(offset as u64),
            })
        } else if offset > 0 {
            Some(ResumptionToken {
                token: String::new(),
                complete_list_size: Some(total),
                cursor: Some(offset as u64),
            })
        } else {
            None
        };
        let payload = match verb {
            Verb::ListIdentifiers => {
                Payload::Headers(page.iter().map(|r| corpus.raw_record(r).header()).collect())
            }
            _ => Payload::Records(page.iter().map(|r| corpus.raw_record(r)).collect()),
        };
        Ok(ListOutcome::Page(payload, token))
    }
}

enum ListOutcome {
    Page(Payload, Option<ResumptionToken>),
    Unavailable,
}

fn oai_dc_format() -> MetadataFormat {
    MetadataFormat {
        prefix: "oai_dc".into(),
        schema: OAI_DC_SCHEMA.into(),
        namespace: OAI_DC_NS.into(),
    }
}

/// Parse a `from`/`until` value. A day-granularity repository rejects
/// seconds values; a bare date used as `until` covers the whole day.
fn parse_bound(
    text: &str,
    granularity: Granularity,
    is_until: bool,
) -> Result<Option<DateTime<Utc>>, OaiError> {
    if text.is_empty() {
        return Ok(None);
    }
    let bad = || {
        oai_err(
            OaiErrorCode::BadArgument,
            format!("illegal datestamp {text:?}"),
        )
    };
    if let Some(d) = parse_date(text) {
        return Ok(Some(if is_until && granularity == Granularity::Seconds {
            time::end_of_day(d)
        } else {
            time::start_of_day(d)
        }));
    }
    if granularity == Granularity::Day {
        return Err(bad());
    }
    time::parse_utc_seconds(text).map(Some).ok_or_else(bad)
}

impl Transport for MockProvider {
    fn get(&self, url: &str, _timeout: Duration) -> Result<HttpResponse, String> {
        let query = url.split_once('?').map_or("", |(_, q)| q);
        let r = self.respond(query);
        Ok(HttpResponse {
            status: r.status,
            retry_after: r.retry_after,
            body: r.body,
        })
    }
}

const TOPICS: &[&str] = &[
    "soil",
    "carbon",
    "flux",
    "vegetation",
    "moisture",
    "precipitation",
    "temperature",
    "biomass",
    "ozone",
    "aerosol",
    "nitrogen",
    "canopy",
    "radiation",
    "snow",
    "permafrost",
    "wetland",
    "fire",
    "albedo",
];
const PLACES: &[&str] = &[
    "Tennessee",
    "Alaska",
    "Amazon",
    "Sahel",
    "Siberia",
    "Kansas",
    "Borneo",
    "Fiji",
    "Patagonia",
    "Yukon",
];
const KINDS: &[&str] = &[
    "measurements",
    "survey",
    "model output",
    "observations",
    "inventory",
    "climatology",
];
const UNITS: &[&str] = &["K", "mm", "kg m-2", "W m-2", "ppm", "percent", "m"];

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSpec {
    pub records: usize,
    pub deleted: usize,
    pub page_size: usize,
    pub granularity: Granularity,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            records: 25,
            deleted: 0,
            page_size: 10,
            granularity: Granularity::Seconds,
        }
    }
}

fn base_instant() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2009, 1, 1, 0, 0, 0).unwrap()
}

fn gen_payload(rng: &mut ChaCha8Rng, n: usize) -> DcPayload {
    let topic = *TOPICS.choose(rng).unwrap();
    let topic2 = *TOPICS.choose(rng).unwrap();
    let place = *PLACES.choose(rng).unwrap();
    let kind = *KINDS.choose(rng).unwrap();
    let mut p = DcPayload {
        titles: vec![format!("{place} {topic} {kind} {n}")],
        descriptions: vec![format!(
            "Gridded {topic} and {topic2} {kind} collected across {place}."
        )],
        subjects: {
            let mut s = vec![topic.to_string(), topic2.to_string(), place.to_string()];
            s.dedup();
            s
        },
        identifiers: vec![format!("https://data.example.org/ds/{n}")],
        ..DcPayload::default()
    };
    if rng.random_bool(0.8) {
        let (west, east) = if rng.random_bool(0.15) {
            // straddle the antimeridian
            (
                rng.random_range(150..180) as f64,
                rng.random_range(-180..-150) as f64,
            )
        } else {
            let w = rng.random_range(-180..170);
            (w as f64, (w + rng.random_range(1..=10)) as f64)
        };
        let south = rng.random_range(-90..80);
        let north = south + rng.random_range(0..=10);
        p.coverages.push(format!(
            "northlimit={north}; southlimit={south}; westlimit={west}; eastlimit={east}"
        ));
    }
    if rng.random_bool(0.7) {
        let start_year = rng.random_range(1980..2009);
        let end_year = start_year + rng.random_range(0..5);
        p.coverages
            .push(format!("start={start_year}-01-01; end={end_year}-12-31"));
    }
    for _ in 0..rng.random_range(0..3) {
        let name = format!(
            "{} {}",
            TOPICS.choose(rng).unwrap(),
            ["mean", "max", "flux"].choose(rng).unwrap()
        );
        p.attributes.push(Attribute {
            name,
            unit: UNITS.choose(rng).unwrap().to_string(),
            precision: rng.random_bool(0.5).then(|| "0.1".to_string()),
            accuracy: None,
        });
    }
    if rng.random_bool(0.5) {
        p.lineage
            .push(format!("Derived from {place} field campaign {kind}."));
    }
    p
}

fn snap(t: DateTime<Utc>, granularity: Granularity) -> DateTime<Utc> {
    match granularity {
        Granularity::Day => day_floor(t),
        Granularity::Seconds => t,
    }
}

/// Produce a reproducible random corpus from `seed`.
pub fn generate_corpus(seed: u64, spec: &GenSpec) -> MockCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<MockRecord> = (0..spec.records)
        .map(|n| {
            let offset = ChronoDuration::seconds(rng.random_range(0..365 * 86_400));
            MockRecord {
                local_identifier: format!("oai:mock.example.org:ds-{n:04}"),
                datestamp: snap(base_instant() + offset, spec.granularity),
                deleted: false,
                payload: gen_payload(&mut rng, n),
                raw_metadata: None,
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(spec.deleted) {
        records[i].deleted = true;
        records[i].payload = DcPayload::default();
    }
    MockCorpus::new(records, spec.page_size, spec.granularity)
}

/// Counts of a [`mutate_corpus`] step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mutation {
    pub updates: usize,
    pub deletions: usize,
    pub additions: usize,
}

/// Update, delete and add records, stamping every touched record with one
/// datestamp strictly after everything already in the corpus. Returns the
/// counts actually applied (bounded by the live records available).
pub fn mutate_corpus(corpus: &mut MockCorpus, rng: &mut ChaCha8Rng, want: &Mutation) -> Mutation {
    let step = match corpus.granularity {
        Granularity::Day => ChronoDuration::days(1),
        Granularity::Seconds => ChronoDuration::seconds(1),
    };
    let stamp = snap(
        corpus.max_datestamp().unwrap_or_else(base_instant) + step,
        corpus.granularity,
    );

    let mut live: Vec<usize> = (0..corpus.records.len())
        .filter(|&i| !corpus.records[i].deleted)
        .collect();
    live.shuffle(rng);
    let updates = want.updates.min(live.len());
    let deletions = want.deletions.min(live.len() - updates);
    for &i in &live[..updates] {
        let r = &mut corpus.records[i];
        r.datestamp = stamp;
        if let Some(t) = r.payload.titles.first_mut() {
            t.push_str(" (revised)");
        }
        r.payload.subjects.push("revised".into());
    }
    for &i in &live[updates..updates + deletions] {
        let r = &mut corpus.records[i];
        r.datestamp = stamp;
        r.deleted = true;
        r.payload = DcPayload::default();
    }
    let first = corpus.records.len();
    for k in 0..want.additions {
        let n = first + k;
        corpus.records.push(MockRecord {
            local_identifier: format!("oai:mock.example.org:ds-{n:04}"),
            datestamp: stamp,
            deleted: false,
            payload: gen_payload(rng, n),
            raw_metadata: None,
        });
    }
    Mutation {
        updates,
        deletions,
        additions: want.additions,
    }
}
