//! UTC instant parsing/formatting shared by the protocol, parser and API.

use chrono::{DateTime, NaiveDate, NaiveTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

/// Datestamp granularity a provider declares in `Identify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Day,
    Seconds,
}

impl Granularity {
    pub const DAY_PATTERN: &'static str = "YYYY-MM-DD";
    pub const SECONDS_PATTERN: &'static str = "YYYY-MM-DDThh:mm:ssZ";

    pub fn pattern(self) -> &'static str {
        match self {
            Granularity::Day => Self::DAY_PATTERN,
            Granularity::Seconds => Self::SECONDS_PATTERN,
        }
    }

    pub fn from_pattern(s: &str) -> Option<Self> {
        match s.trim() {
            Self::DAY_PATTERN => Some(Granularity::Day),
            Self::SECONDS_PATTERN => Some(Granularity::Seconds),
            _ => None,
        }
    }

    pub fn format(self, t: DateTime<Utc>) -> String {
        match self {
            Granularity::Day => t.format("%Y-%m-%d").to_string(),
            Granularity::Seconds => format_instant(t),
        }
    }
}

/// RFC 3339 with whole seconds and a `Z` suffix.
pub fn format_instant(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Current time truncated to whole seconds.
pub fn now() -> DateTime<Utc> {
    let t = Utc::now();
    Utc.timestamp_opt(t.timestamp(), 0).single().unwrap_or(t)
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    // chrono accepts variable-width fields; insist on the fixed shape
    if s.len() != 10 || s.as_bytes()[4] != b'-' || s.as_bytes()[7] != b'-' {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

pub fn start_of_day(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_time(NaiveTime::MIN))
}

pub fn end_of_day(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_hms_opt(23, 59, 59).expect("valid time"))
}

/// Parse an OAI-PMH datestamp in either day or seconds granularity.
///
/// Day values map to midnight UTC.
pub fn parse_datestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Some(d) = parse_date(s) {
        return Some(start_of_day(d));
    }
    parse_utc_seconds(s)
}

/// Strict `YYYY-MM-DDThh:mm:ssZ`.
pub fn parse_utc_seconds(s: &str) -> Option<DateTime<Utc>> {
    if s.len() != 20 || !s.ends_with('Z') {
        return None;
    }
    chrono::NaiveDateTime::parse_from_str(&s[..19], "%Y-%m-%dT%H:%M:%S")
        .ok()
        .map(|n| Utc.from_utc_datetime(&n))
}

/// Parse any RFC 3339 instant, converting to UTC.
pub fn parse_rfc3339(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Which end of a day a bare date expands to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayBound {
    Start,
    End,
}

/// Parse an RFC 3339 instant or a bare `YYYY-MM-DD` date expanded to the
/// given day bound.
pub fn parse_instant_or_date(s: &str, bound: DayBound) -> Option<DateTime<Utc>> {
    if let Some(d) = parse_date(s) {
        return Some(match bound {
            DayBound::Start => start_of_day(d),
            DayBound::End => end_of_day(d),
        });
    }
    parse_rfc3339(s)
}

pub mod rfc3339 {
    use chrono::{DateTime, Utc};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_instant(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_rfc3339(&s)
            .ok_or_else(|| D::Error::custom(format!("invalid RFC 3339 instant {s:?}")))
    }
}

pub mod rfc3339_opt {
    use chrono::{DateTime, Utc};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_str(&super::format_instant(*t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
        match Option::<String>::deserialize(d)? {
            None => Ok(None),
            Some(s) => super::parse_rfc3339(&s)
                .map(Some)
                .ok_or_else(|| D::Error::custom(format!("invalid RFC 3339 instant {s:?}"))),
        }
    }
}
