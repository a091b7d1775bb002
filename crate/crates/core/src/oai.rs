//! OAI-PMH 2.0 request construction and response envelope parsing.
//!
//! This is the pure protocol layer: no I/O happens here. The harvester uses
//! it to talk to providers and the mock provider uses the same types to
//! describe what it emits.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use thiserror::Error;

use crate::time::{parse_datestamp, parse_rfc3339, Granularity};
use crate::xml::{self, Element, XmlError};

pub const OAI_NS: &str = "http://www.openarchives.org/OAI/2.0/";
pub const OAI_DC_NS: &str = "http://www.openarchives.org/OAI/2.0/oai_dc/";
pub const DC_NS: &str = "http://purl.org/dc/elements/1.1/";
pub const XSI_NS: &str = "http://www.w3.org/2001/XMLSchema-instance";
pub const OAI_SCHEMA_LOCATION: &str =
    "http://www.openarchives.org/OAI/2.0/ http://www.openarchives.org/OAI/2.0/OAI-PMH.xsd";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("illegal argument {argument} for {verb}: {reason}")]
    IllegalArgument {
        verb: Verb,
        argument: String,
        reason: &'static str,
    },
    #[error("invalid base URL {0:?}")]
    BadBaseUrl(String),
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("input is not UTF-8 (first invalid byte at {offset})")]
    Encoding { offset: u64 },
    #[error("unexpected response structure: {0}")]
    Structure(String),
    #[error("envelope payload is not a list response")]
    NotAList,
}

impl ProtocolError {
    fn missing(element: &str, parent: &str) -> Self {
        ProtocolError::Structure(format!("missing element <{element}> in <{parent}>"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Identify,
    ListMetadataFormats,
    ListSets,
    ListIdentifiers,
    ListRecords,
    GetRecord,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::Identify,
        Verb::ListMetadataFormats,
        Verb::ListSets,
        Verb::ListIdentifiers,
        Verb::ListRecords,
        Verb::GetRecord,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Identify => "Identify",
            Verb::ListMetadataFormats => "ListMetadataFormats",
            Verb::ListSets => "ListSets",
            Verb::ListIdentifiers => "ListIdentifiers",
            Verb::ListRecords => "ListRecords",
            Verb::GetRecord => "GetRecord",
        }
    }

    fn rules(self) -> VerbRules {
        use Argument::*;
        match self {
            Verb::Identify => VerbRules::new(&[], &[], false),
            Verb::ListMetadataFormats => VerbRules::new(&[], &[Identifier], false),
            Verb::ListSets => VerbRules::new(&[], &[], true),
            Verb::ListIdentifiers | Verb::ListRecords => {
                VerbRules::new(&[MetadataPrefix], &[From, Until, Set], true)
            }
            Verb::GetRecord => VerbRules::new(&[Identifier, MetadataPrefix], &[], false),
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL.into_iter().find(|v| v.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Argument {
    MetadataPrefix,
    From,
    Until,
    Set,
    Identifier,
    ResumptionToken,
}

impl Argument {
    pub const ALL: [Argument; 6] = [
        Argument::MetadataPrefix,
        Argument::From,
        Argument::Until,
        Argument::Set,
        Argument::Identifier,
        Argument::ResumptionToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Argument::MetadataPrefix => "metadataPrefix",
            Argument::From => "from",
            Argument::Until => "until",
            Argument::Set => "set",
            Argument::Identifier => "identifier",
            Argument::ResumptionToken => "resumptionToken",
        }
    }
}

impl FromStr for Argument {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Argument::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or(())
    }
}

struct VerbRules {
    required: &'static [Argument],
    optional: &'static [Argument],
    resumable: bool,
}

impl VerbRules {
    const fn new(
        required: &'static [Argument],
        optional: &'static [Argument],
        resumable: bool,
    ) -> Self {
        Self {
            required,
            optional,
            resumable,
        }
    }
}

/// Check that `arguments` are legal for `verb`. Shared by the client-side
/// request builder and the mock provider's request handling.
pub fn check_arguments(verb: Verb, arguments: &[(Argument, String)]) -> Result<(), ProtocolError> {
    let rules = verb.rules();
    let illegal = |a: Argument, reason| ProtocolError::IllegalArgument {
        verb,
        argument: a.as_str().to_string(),
        reason,
    };
    for (i, (a, _)) in arguments.iter().enumerate() {
        if arguments[..i].iter().any(|(b, _)| b == a) {
            return Err(illegal(*a, "repeated argument"));
        }
    }
    if arguments
        .iter()
        .any(|(a, _)| *a == Argument::ResumptionToken)
    {
        if !rules.resumable {
            return Err(illegal(
                Argument::ResumptionToken,
                "verb does not accept a resumption token",
            ));
        }
        if let Some((other, _)) = arguments
            .iter()
            .find(|(a, _)| *a != Argument::ResumptionToken)
        {
            return Err(illegal(*other, "resumptionToken is exclusive"));
        }
        return Ok(());
    }
    for (a, _) in arguments {
        if !rules.required.contains(a) && !rules.optional.contains(a) {
            return Err(illegal(*a, "argument not allowed for this verb"));
        }
    }
    for r in rules.required {
        if !arguments.iter().any(|(a, _)| a == r) {
            return Err(illegal(*r, "required argument missing"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarvestRequest {
    pub base_url: String,
    pub verb: Verb,
    pub arguments: Vec<(Argument, String)>,
}

impl HarvestRequest {
    pub fn new(base_url: impl Into<String>, verb: Verb) -> Self {
        Self {
            base_url: base_url.into(),
            verb,
            arguments: Vec::new(),
        }
    }

    pub fn arg(mut self, argument: Argument, value: impl Into<String>) -> Self {
        self.arguments.push((argument, value.into()));
        self
    }
}

/// Everything except RFC 3986 unreserved characters.
const QUERY_VALUE: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

pub fn encode_query_value(v: &str) -> String {
    utf8_percent_encode(v, QUERY_VALUE).to_string()
}

/// Build the GET URL for a request: `base?verb=V&name=value...` with
/// arguments in the given order.
pub fn build_request(request: &HarvestRequest) -> Result<String, ProtocolError> {
    match url::Url::parse(&request.base_url) {
        Ok(u) if u.query().is_none() && u.fragment().is_none() && u.has_host() => {}
        _ => return Err(ProtocolError::BadBaseUrl(request.base_url.clone())),
    }
    check_arguments(request.verb, &request.arguments)?;
    let mut out = format!("{}?verb={}", request.base_url, request.verb.as_str());
    for (a, v) in &request.arguments {
        out.push('&');
        out.push_str(a.as_str());
        out.push('=');
        out.push_str(&encode_query_value(v));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OaiErrorCode {
    BadArgument,
    BadResumptionToken,
    BadVerb,
    CannotDisseminateFormat,
    IdDoesNotExist,
    NoRecordsMatch,
    NoMetadataFormats,
    NoSetHierarchy,
}

impl OaiErrorCode {
    pub const ALL: [OaiErrorCode; 8] = [
        OaiErrorCode::BadArgument,
        OaiErrorCode::BadResumptionToken,
        OaiErrorCode::BadVerb,
        OaiErrorCode::CannotDisseminateFormat,
        OaiErrorCode::IdDoesNotExist,
        OaiErrorCode::NoRecordsMatch,
        OaiErrorCode::NoMetadataFormats,
        OaiErrorCode::NoSetHierarchy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OaiErrorCode::BadArgument => "badArgument",
            OaiErrorCode::BadResumptionToken => "badResumptionToken",
            OaiErrorCode::BadVerb => "badVerb",
            OaiErrorCode::CannotDisseminateFormat => "cannotDisseminateFormat",
            OaiErrorCode::IdDoesNotExist => "idDoesNotExist",
            OaiErrorCode::NoRecordsMatch => "noRecordsMatch",
            OaiErrorCode::NoMetadataFormats => "noMetadataFormats",
            OaiErrorCode::NoSetHierarchy => "noSetHierarchy",
        }
    }
}

impl FromStr for OaiErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OaiErrorCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or(())
    }
}

impl fmt::Display for OaiErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OaiError {
    pub code: OaiErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResumptionToken {
    pub token: String,
    pub complete_list_size: Option<u64>,
    pub cursor: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHeader {
    pub identifier: String,
    pub datestamp: DateTime<Utc>,
    pub set_specs: Vec<String>,
    pub deleted: bool,
}

/// A record as delivered by a provider: header fields plus the metadata
/// payload (absent exactly when the record is deleted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub identifier: String,
    pub datestamp: DateTime<Utc>,
    pub set_specs: Vec<String>,
    pub deleted: bool,
    pub metadata_xml: Option<String>,
}

impl RawRecord {
    pub fn header(&self) -> RecordHeader {
        RecordHeader {
            identifier: self.identifier.clone(),
            datestamp: self.datestamp,
            set_specs: self.set_specs.clone(),
            deleted: self.deleted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifyInfo {
    pub repository_name: String,
    pub base_url: String,
    pub protocol_version: String,
    pub admin_emails: Vec<String>,
    pub earliest_datestamp: DateTime<Utc>,
    pub deleted_record: String,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataFormat {
    pub prefix: String,
    pub schema: String,
    pub namespace: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetInfo {
    pub spec: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Identify(IdentifyInfo),
    Formats(Vec<MetadataFormat>),
    Sets(Vec<SetInfo>),
    Records(Vec<RawRecord>),
    Headers(Vec<RecordHeader>),
    Record(RawRecord),
    Error(OaiError),
}

impl Payload {
    pub fn is_list(&self) -> bool {
        matches!(
            self,
            Payload::Formats(_) | Payload::Sets(_) | Payload::Records(_) | Payload::Headers(_)
        )
    }
}

/// The `<request>` element echoed back by the provider.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestEcho {
    pub base_url: String,
    pub attributes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OaiEnvelope {
    pub response_date: DateTime<Utc>,
    pub request_echo: RequestEcho,
    pub payload: Payload,
    pub resumption: Option<ResumptionToken>,
}

/// The resumption token to continue a list response with, if any.
pub fn next_page(envelope: &OaiEnvelope) -> Result<Option<ResumptionToken>, ProtocolError> {
    if !envelope.payload.is_list() {
        return Err(ProtocolError::NotAList);
    }
    Ok(envelope.resumption.clone())
}

pub fn parse_envelope_bytes(bytes: &[u8]) -> Result<OaiEnvelope, ProtocolError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse_envelope(s),
        Err(e) => Err(ProtocolError::Encoding {
            offset: e.valid_up_to() as u64,
        }),
    }
}

pub fn parse_envelope(xml_text: &str) -> Result<OaiEnvelope, ProtocolError> {
    let root = xml::parse_document(xml_text)?;
    if root.local != "OAI-PMH" {
        return Err(ProtocolError::Structure(format!(
            "root element is <{}>, expected <OAI-PMH>",
            root.qname
        )));
    }
    if let Some(ns) = &root.namespace {
        if ns != OAI_NS {
            return Err(ProtocolError::Structure(format!(
                "root element in foreign namespace {ns}"
            )));
        }
    }

    let response_date = required_text(&root, "responseDate")?;
    let response_date = parse_datestamp(&response_date)
        .or_else(|| parse_rfc3339(&response_date))
        .ok_or_else(|| ProtocolError::Structure(format!("bad responseDate {response_date:?}")))?;

    let request = root
        .child("request")
        .ok_or_else(|| ProtocolError::missing("request", "OAI-PMH"))?;
    let request_echo = RequestEcho {
        base_url: request.text().trim().to_string(),
        attributes: request.attrs.clone(),
    };

    if let Some(err) = root.child("error") {
        let code = err
            .attr("code")
            .ok_or_else(|| ProtocolError::Structure("<error> without code attribute".into()))?;
        let code = code
            .parse::<OaiErrorCode>()
            .map_err(|_| ProtocolError::Structure(format!("unknown error code {code:?}")))?;
        return Ok(OaiEnvelope {
            response_date,
            request_echo,
            payload: Payload::Error(OaiError {
                code,
                message: err.text().trim().to_string(),
            }),
            resumption: None,
        });
    }

    let body = root
        .elements()
        .find(|e| e.local.parse::<Verb>().is_ok())
        .ok_or_else(|| {
            ProtocolError::Structure(
                "missing element: one of <Identify>, <ListMetadataFormats>, <ListSets>, \
                 <ListIdentifiers>, <ListRecords>, <GetRecord> or <error>"
                    .into(),
            )
        })?;
    let verb: Verb = body.local.parse().expect("checked above");

    let (payload, resumption) = match verb {
        Verb::Identify => (Payload::Identify(parse_identify(body)?), None),
        Verb::ListMetadataFormats => {
            let formats = body
                .children_named("metadataFormat")
                .map(|f| {
                    Ok(MetadataFormat {
                        prefix: required_text(f, "metadataPrefix")?,
                        schema: required_text(f, "schema")?,
                        namespace: required_text(f, "metadataNamespace")?,
                    })
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            (Payload::Formats(formats), parse_token(body)?)
        }
        Verb::ListSets => {
            let sets = body
                .children_named("set")
                .map(|s| {
                    Ok(SetInfo {
                        spec: required_text(s, "setSpec")?,
                        name: required_text(s, "setName")?,
                    })
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            (Payload::Sets(sets), parse_token(body)?)
        }
        Verb::ListIdentifiers => {
            let headers = body
                .children_named("header")
                .map(parse_header)
                .collect::<Result<Vec<_>, _>>()?;
            (Payload::Headers(headers), parse_token(body)?)
        }
        Verb::ListRecords => {
            let records = body
                .children_named("record")
                .map(|r| parse_record(r, xml_text))
                .collect::<Result<Vec<_>, _>>()?;
            (Payload::Records(records), parse_token(body)?)
        }
        Verb::GetRecord => {
            let r = body
                .child("record")
                .ok_or_else(|| ProtocolError::missing("record", "GetRecord"))?;
            (Payload::Record(parse_record(r, xml_text)?), None)
        }
    };

    Ok(OaiEnvelope {
        response_date,
        request_echo,
        payload,
        resumption,
    })
}

fn required_text(parent: &Element, local: &str) -> Result<String, ProtocolError> {
    parent
        .child(local)
        .map(|e| e.text().trim().to_string())
        .ok_or_else(|| ProtocolError::missing(local, &parent.local))
}

fn parse_identify(body: &Element) -> Result<IdentifyInfo, ProtocolError> {
    let earliest = required_text(body, "earliestDatestamp")?;
    let granularity = required_text(body, "granularity")?;
    let admin_emails: Vec<String> = body
        .children_named("adminEmail")
        .map(|e| e.text().trim().to_string())
        .collect();
    if admin_emails.is_empty() {
        return Err(ProtocolError::missing("adminEmail", "Identify"));
    }
    Ok(IdentifyInfo {
        repository_name: required_text(body, "repositoryName")?,
        base_url: required_text(body, "baseURL")?,
        protocol_version: required_text(body, "protocolVersion")?,
        admin_emails,
        earliest_datestamp: parse_datestamp(&earliest).ok_or_else(|| {
            ProtocolError::Structure(format!("bad earliestDatestamp {earliest:?}"))
        })?,
        deleted_record: required_text(body, "deletedRecord")?,
        granularity: Granularity::from_pattern(&granularity).ok_or_else(|| {
            ProtocolError::Structure(format!("unknown granularity {granularity:?}"))
        })?,
    })
}

fn parse_header(h: &Element) -> Result<RecordHeader, ProtocolError> {
    let identifier = required_text(h, "identifier")?;
    if identifier.is_empty() {
        return Err(ProtocolError::Structure("empty <identifier>".into()));
    }
    let datestamp = required_text(h, "datestamp")?;
    let datestamp = parse_datestamp(&datestamp)
        .ok_or_else(|| ProtocolError::Structure(format!("bad datestamp {datestamp:?}")))?;
    Ok(RecordHeader {
        identifier,
        datestamp,
        set_specs: h
            .children_named("setSpec")
            .map(|s| s.text().trim().to_string())
            .collect(),
        deleted: h.attr("status") == Some("deleted"),
    })
}

fn parse_record(r: &Element, source: &str) -> Result<RawRecord, ProtocolError> {
    let header = parse_header(
        r.child("header")
            .ok_or_else(|| ProtocolError::missing("header", "record"))?,
    )?;
    let metadata_xml = if header.deleted {
        None
    } else {
        let m = r
            .child("metadata")
            .ok_or_else(|| ProtocolError::missing("metadata", "record"))?;
        let mut inner = m.elements();
        let payload = inner
            .next()
            .ok_or_else(|| ProtocolError::Structure("empty <metadata> element".into()))?;
        if inner.next().is_some() || m.has_non_whitespace_text() {
            return Err(ProtocolError::Structure(
                "<metadata> must contain exactly one element".into(),
            ));
        }
        Some(payload.outer_xml(source))
    };
    Ok(RawRecord {
        identifier: header.identifier,
        datestamp: header.datestamp,
        set_specs: header.set_specs,
        deleted: header.deleted,
        metadata_xml,
    })
}

fn parse_count(el: &Element, name: &str) -> Result<Option<u64>, ProtocolError> {
    el.attr(name)
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| ProtocolError::Structure(format!("bad {name} {v:?}")))
        })
        .transpose()
}

fn parse_token(body: &Element) -> Result<Option<ResumptionToken>, ProtocolError> {
    let Some(t) = body.child("resumptionToken") else {
        return Ok(None);
    };
    let token = t.text().trim().to_string();
    if token.is_empty() {
        // empty token element marks the final page of a list
        return Ok(None);
    }
    Ok(Some(ResumptionToken {
        token,
        complete_list_size: parse_count(t, "completeListSize")?,
        cursor: parse_count(t, "cursor")?,
    }))
}
