//! Full and incremental OAI-PMH harvesting.
//!
//! A harvest pages through `ListRecords`, following resumption tokens until
//! the list is exhausted, and hands every page to [`Catalog::apply_page`].
//! Incremental harvests restart from the inclusive `from` cursor of the
//! last fully successful run; re-fetched boundary records are recognized as
//! unchanged, so the overlap costs nothing.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, HarvestGuard};
use crate::model::is_valid_provider_key;
use crate::oai::{
    build_request, parse_envelope, Argument, HarvestRequest, OaiEnvelope, OaiErrorCode, Payload,
    Verb,
};
use crate::store::StoreError;
use crate::time::{self, rfc3339_opt, Granularity};

pub const DEFAULT_METADATA_PREFIX: &str = "oai_dc";
pub const DEFAULT_PAGE_TIMEOUT_SECS: u64 = 30;
pub const RETRY_BUDGET: u32 = 5;
pub const MAX_BACKOFF_SECS: u64 = 60;
pub const MAX_RETRY_AFTER_SECS: u64 = 300;

fn default_prefix() -> String {
    DEFAULT_METADATA_PREFIX.to_string()
}

fn default_timeout() -> u64 {
    DEFAULT_PAGE_TIMEOUT_SECS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_key: String,
    pub base_url: String,
    #[serde(default = "default_prefix")]
    pub metadata_prefix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub page_timeout: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("provider_key {0:?} must match [a-z0-9_-]+")]
    ProviderKey(String),
    #[error("base_url {0:?} is not an http(s) URL without query")]
    BaseUrl(String),
    #[error("metadata_prefix must not be empty")]
    MetadataPrefix,
    #[error("page_timeout must be positive")]
    PageTimeout,
    #[error("duplicate provider_key {0:?}")]
    Duplicate(String),
}

impl ProviderConfig {
    pub fn new(provider_key: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            provider_key: provider_key.into(),
            base_url: base_url.into(),
            metadata_prefix: default_prefix(),
            set: None,
            page_timeout: DEFAULT_PAGE_TIMEOUT_SECS,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !is_valid_provider_key(&self.provider_key) {
            return Err(ConfigError::ProviderKey(self.provider_key.clone()));
        }
        validate_base_url(&self.base_url)?;
        if self.metadata_prefix.trim().is_empty() {
            return Err(ConfigError::MetadataPrefix);
        }
        if self.page_timeout == 0 {
            return Err(ConfigError::PageTimeout);
        }
        Ok(())
    }
}

pub fn validate_base_url(base_url: &str) -> Result<(), ConfigError> {
    // The URL parser silently drops tabs and newlines, so reject them here.
    // It also repairs `http:///x` and `http:x` into `http://x/`.
    let has_authority = base_url
        .split_once("://")
        .is_some_and(|(_, rest)| !rest.is_empty() && !rest.starts_with(['/', '\\']));
    if !has_authority
        || base_url
            .chars()
            .any(|c| c.is_whitespace() || c.is_control())
    {
        return Err(ConfigError::BaseUrl(base_url.to_string()));
    }
    match url::Url::parse(base_url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.has_host() && u.query().is_none() => {
            Ok(())
        }
        _ => Err(ConfigError::BaseUrl(base_url.to_string())),
    }
}

/// Check a whole provider list, including key uniqueness.
pub fn validate_providers(providers: &[ProviderConfig]) -> Result<(), ConfigError> {
    for (i, p) in providers.iter().enumerate() {
        p.validate()?;
        if providers[..i]
            .iter()
            .any(|q| q.provider_key == p.provider_key)
        {
            return Err(ConfigError::Duplicate(p.provider_key.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    #[default]
    NeverRun,
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestState {
    pub provider_key: String,
    /// Max record datestamp seen in the last fully successful harvest.
    #[serde(default, with = "rfc3339_opt", skip_serializing_if = "Option::is_none")]
    pub last_success_datestamp: Option<DateTime<Utc>>,
    #[serde(default, with = "rfc3339_opt", skip_serializing_if = "Option::is_none")]
    pub last_run_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub last_run_outcome: RunOutcome,
}

impl HarvestState {
    pub fn new(provider_key: impl Into<String>) -> Self {
        Self {
            provider_key: provider_key.into(),
            last_success_datestamp: None,
            last_run_at: None,
            last_run_outcome: RunOutcome::NeverRun,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarvestMode {
    Full,
    Incremental,
}

impl std::str::FromStr for HarvestMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(HarvestMode::Full),
            "incremental" => Ok(HarvestMode::Incremental),
            other => Err(format!(
                "unknown harvest mode {other:?} (expected full or incremental)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestReport {
    pub provider_key: String,
    pub mode: HarvestMode,
    pub pages: u64,
    pub new: u64,
    pub updated: u64,
    pub unchanged: u64,
    pub deleted: u64,
    pub warnings: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl HarvestReport {
    fn new(provider_key: &str, mode: HarvestMode) -> Self {
        Self {
            provider_key: provider_key.to_string(),
            mode,
            pages: 0,
            new: 0,
            updated: 0,
            unchanged: 0,
            deleted: 0,
            warnings: 0,
            error: None,
        }
    }

    pub fn processed(&self) -> u64 {
        self.new + self.updated + self.unchanged + self.deleted
    }

    fn add(&mut self, page: &PageStats) {
        self.new += page.new;
        self.updated += page.updated;
        self.unchanged += page.unchanged;
        self.deleted += page.deleted;
        self.warnings += page.warnings;
    }
}

/// Outcome of applying one page of records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageStats {
    pub new: u64,
    pub updated: u64,
    pub unchanged: u64,
    pub deleted: u64,
    pub warnings: u64,
    pub max_datestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Error)]
pub enum HarvestError {
    #[error("harvest in progress for provider {0:?}")]
    InProgress(String),
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A provider HTTP response as seen by the harvester.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    /// `Retry-After` header in seconds, when present.
    pub retry_after: Option<u64>,
    pub body: String,
}

/// Blocking HTTP GET used to reach providers.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str, timeout: Duration) -> Result<HttpResponse, String>;
}

/// Delay before retry number `attempt` (1-based): `min(2^(attempt-1), 60)` s.
pub fn backoff_schedule(attempt: u32) -> Duration {
    let attempt = attempt.max(1);
    let secs = if attempt > 7 {
        MAX_BACKOFF_SECS
    } else {
        (1u64 << (attempt - 1)).min(MAX_BACKOFF_SECS)
    };
    Duration::from_secs(secs)
}

/// The delay to wait after a failed attempt, honoring a 503 `Retry-After`.
pub fn retry_delay(attempt: u32, response: Option<&HttpResponse>) -> Duration {
    match response {
        Some(HttpResponse {
            status: 503,
            retry_after: Some(secs),
            ..
        }) => Duration::from_secs((*secs).min(MAX_RETRY_AFTER_SECS)),
        _ => backoff_schedule(attempt),
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub sleep: Sleeper,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: RETRY_BUDGET,
            sleep: Arc::new(std::thread::sleep),
        }
    }
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_attempts", &self.max_attempts)
            .finish_non_exhaustive()
    }
}

pub struct Harvester<'a> {
    catalog: &'a Catalog,
    transport: &'a dyn Transport,
    retry: RetryPolicy,
}

impl<'a> Harvester<'a> {
    pub fn new(catalog: &'a Catalog, transport: &'a dyn Transport) -> Self {
        Self {
            catalog,
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Harvest a configured provider, persisting its updated state.
    pub fn harvest(
        &self,
        provider_key: &str,
        mode: HarvestMode,
    ) -> Result<HarvestReport, HarvestError> {
        let guard = self.catalog.try_begin_harvest(provider_key)?;
        self.harvest_guarded(&guard, mode)
    }

    /// Like [`Harvester::harvest`] for callers that already hold the
    /// provider's harvest guard.
    pub fn harvest_guarded(
        &self,
        guard: &HarvestGuard,
        mode: HarvestMode,
    ) -> Result<HarvestReport, HarvestError> {
        let key = guard.provider_key();
        let provider = self
            .catalog
            .provider(key)?
            .ok_or_else(|| HarvestError::UnknownProvider(key.to_string()))?;
        let state = self.catalog.harvest_state(key)?;
        let (report, state) = self.run(&provider, state, mode);
        self.catalog.save_harvest_state(state)?;
        Ok(report)
    }

    /// Run one harvest against `provider` starting from `state`.
    pub fn run(
        &self,
        provider: &ProviderConfig,
        state: HarvestState,
        mode: HarvestMode,
    ) -> (HarvestReport, HarvestState) {
        let mut mode = mode;
        let mut warnings = 0;
        if mode == HarvestMode::Incremental && state.last_success_datestamp.is_none() {
            tracing::info!(provider = %provider.provider_key, "no cursor yet; promoting to full harvest");
            mode = HarvestMode::Full;
            warnings += 1;
        }
        let mut report = HarvestReport::new(&provider.provider_key, mode);
        report.warnings = warnings;
        let mut max_seen: Option<DateTime<Utc>> = None;

        let outcome = self.list_all(provider, &state, mode, &mut report, &mut max_seen);

        let mut next = state.clone();
        next.last_run_at = Some(time::now());
        match outcome {
            Ok(()) => {
                next.last_run_outcome = RunOutcome::Success;
                next.last_success_datestamp = match (state.last_success_datestamp, max_seen) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
            Err(e) => {
                tracing::warn!(provider = %provider.provider_key, error = %e, "harvest failed");
                next.last_run_outcome = RunOutcome::Failed;
                report.error = Some(e);
            }
        }
        (report, next)
    }

    fn list_all(
        &self,
        provider: &ProviderConfig,
        state: &HarvestState,
        mode: HarvestMode,
        report: &mut HarvestReport,
        max_seen: &mut Option<DateTime<Utc>>,
    ) -> Result<(), String> {
        let from = match (mode, state.last_success_datestamp) {
            (HarvestMode::Incremental, Some(cursor)) => {
                let granularity = self.granularity(provider)?;
                Some(granularity.format(cursor))
            }
            _ => None,
        };

        let mut token: Option<String> = None;
        let mut restarted = false;
        loop {
            let mut req = HarvestRequest::new(&provider.base_url, Verb::ListRecords);
            match &token {
                Some(t) => req = req.arg(Argument::ResumptionToken, t),
                None => {
                    req = req.arg(Argument::MetadataPrefix, &provider.metadata_prefix);
                    if let Some(f) = &from {
                        req = req.arg(Argument::From, f);
                    }
                    if let Some(s) = &provider.set {
                        req = req.arg(Argument::Set, s);
                    }
                }
            }
            let env = self.fetch(&req, provider)?;
            match env.payload {
                Payload::Records(records) => {
                    let stats = self
                        .catalog
                        .apply_page(&records, provider)
                        .map_err(|e| format!("store write failed: {e}"))?;
                    report.pages += 1;
                    report.add(&stats);
                    if let Some(ds) = stats.max_datestamp {
                        *max_seen = Some(max_seen.map_or(ds, |m| m.max(ds)));
                    }
                }
                Payload::Error(e) if e.code == OaiErrorCode::NoRecordsMatch => return Ok(()),
                Payload::Error(e)
                    if e.code == OaiErrorCode::BadResumptionToken
                        && token.is_some()
                        && !restarted =>
                {
                    tracing::warn!(provider = %provider.provider_key, "resumption token rejected; restarting listing");
                    restarted = true;
                    token = None;
                    continue;
                }
                Payload::Error(e) => {
                    return Err(format!("provider error {}: {}", e.code, e.message))
                }
                _ => return Err("unexpected payload in ListRecords response".into()),
            }
            match env.resumption {
                Some(t) => token = Some(t.token),
                None => return Ok(()),
            }
        }
    }

    fn granularity(&self, provider: &ProviderConfig) -> Result<Granularity, String> {
        let env = self.fetch(
            &HarvestRequest::new(&provider.base_url, Verb::Identify),
            provider,
        )?;
        Ok(match env.payload {
            Payload::Identify(info) => info.granularity,
            _ => Granularity::Day,
        })
    }

    fn fetch(
        &self,
        req: &HarvestRequest,
        provider: &ProviderConfig,
    ) -> Result<OaiEnvelope, String> {
        let url = build_request(req).map_err(|e| e.to_string())?;
        let timeout = Duration::from_secs(provider.page_timeout);
        let mut attempt = 1;
        loop {
            let result = self.transport.get(&url, timeout);
            let retryable = match &result {
                Ok(r) if r.status == 200 => {
                    return parse_envelope(&r.body)
                        .map_err(|e| format!("bad response from {url}: {e}"))
                }
                Ok(r) => r.status >= 500 || r.status == 429,
                Err(_) => true,
            };
            let describe = match &result {
                Ok(r) => format!("HTTP {}", r.status),
                Err(e) => e.clone(),
            };
            if !retryable || attempt >= self.retry.max_attempts {
                return Err(format!(
                    "GET {url} failed after {attempt} attempt(s): {describe}"
                ));
            }
            let delay = retry_delay(attempt, result.as_ref().ok());
            tracing::debug!(%url, attempt, ?delay, "retrying: {describe}");
            (self.retry.sleep)(delay);
            attempt += 1;
        }
    }
}
