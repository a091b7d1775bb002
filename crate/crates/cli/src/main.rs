//! `mercury`: operator commands for the metadata catalog.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mercury_core::catalog::{Catalog, CatalogError};
use mercury_core::harvest::{HarvestError, HarvestMode, HarvestReport, Harvester, ProviderConfig};
use mercury_core::index::query::SearchParams;
use mercury_core::index::SearchResult;
use mercury_core::mock::{generate_corpus, GenSpec, MockCorpus, MockProvider};
use mercury_core::model::MetadataRecord;
use mercury_core::time::Granularity;
use mercury_server::config::{Config, LogLevel, CONFIG_ENV};
use mercury_server::HttpTransport;

#[derive(Parser)]
#[command(
    name = "mercury",
    version,
    about = "Federated scientific metadata catalog"
)]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Store directory, overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<LogLevel>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP search service.
    Serve {
        /// Listen address, overriding the config file.
        #[arg(long, value_name = "HOST:PORT")]
        listen: Option<String>,
    },
    /// Manage OAI-PMH providers.
    #[command(subcommand)]
    Provider(ProviderCommand),
    /// Harvest one provider.
    Harvest {
        provider_key: String,
        /// Ignore the datestamp cursor and re-list everything.
        #[arg(long)]
        full: bool,
        /// Print the harvest report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Search the catalog.
    Search(SearchArgs),
    /// Replay the journal and report the live record count.
    Reindex {
        /// Also rewrite the journal to one entry per live record.
        #[arg(long)]
        compact: bool,
    },
    /// Write every live record as one JSON object per line.
    Export {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Load records written by `export`.
    Import { file: PathBuf },
    /// Serve a corpus file as an OAI-PMH provider.
    MockProvider {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:8081")]
        listen: String,
    },
    /// Write a reproducible random corpus file for `mock-provider`.
    GenerateCorpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        records: usize,
        #[arg(long, default_value_t = 0)]
        deleted: usize,
        #[arg(long, default_value_t = 10)]
        page_size: usize,
        #[arg(long, value_enum, default_value_t = GranularityArg::Seconds)]
        granularity: GranularityArg,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProviderCommand {
    /// Add a provider, or replace the one with the same key.
    Add {
        provider_key: String,
        base_url: String,
        #[arg(long, default_value = "oai_dc")]
        metadata_prefix: String,
        #[arg(long)]
        set: Option<String>,
        /// Per-page request timeout in seconds.
        #[arg(long, default_value_t = 30)]
        page_timeout: u64,
    },
    /// Show configured providers with their harvest state
    List {
        #[arg(long)]
        json: bool,
    },
    /// Forget a provider; its harvested records stay in the catalog
    Remove { provider_key: String },
}

#[derive(Args)]
struct SearchArgs {
    /// Free-text query; omit to browse newest first.
    q: Option<String>,
    /// west,south,east,north in degrees.
    #[arg(long, allow_hyphen_values = true, value_name = "W,S,E,N")]
    bbox: Option<String>,
    /// RFC 3339 instant or YYYY-MM-DD.
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    end: Option<String>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    keyword: Option<String>,
    #[arg(long)]
    page: Option<String>,
    #[arg(long)]
    size: Option<String>,
    /// Print the same JSON body as `GET /api/search`.
    #[arg(long)]
    json: bool,
}

impl SearchArgs {
    fn params(&self) -> SearchParams {
        SearchParams {
            q: self.q.clone(),
            bbox: self.bbox.clone(),
            start: self.start.clone(),
            end: self.end.clone(),
            provider: self.provider.clone(),
            keyword: self.keyword.clone(),
            page: self.page.clone(),
            size: self.size.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Day,
    Seconds,
}

enum Failure {
    Usage(String),
    Operational(String),
}

impl Failure {
    fn op(e: impl std::fmt::Display) -> Self {
        Failure::Operational(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Operational(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut config =
        Config::locate(cli.config.as_deref(), None).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(store) = cli.store {
        config.store_dir = store;
    }
    if let Some(level) = cli.log_level {
        config.log_level = level;
    }
    init_logging(config.log_level);

    match cli.command {
        Command::Serve { listen } => {
            if let Some(listen) = listen {
                config.listen = listen;
            }
            runtime()?
                .block_on(mercury_server::serve(&config))
                .map_err(Failure::op)
        }
        Command::Provider(cmd) => provider(&config, cmd),
        Command::Harvest {
            provider_key,
            full,
            json,
        } => harvest(&config, &provider_key, full, json),
        Command::Search(args) => search(&config, &args),
        Command::Reindex { compact } => reindex(&config, compact),
        Command::Export { out } => export(&config, &out),
        Command::Import { file } => import(&config, &file),
        Command::MockProvider { corpus, listen } => mock_provider(&corpus, &listen),
        Command::GenerateCorpus {
            seed,
            records,
            deleted,
            page_size,
            granularity,
            out,
        } => {
            if deleted > records || page_size == 0 {
                return Err(Failure::Usage(
                    "--deleted must not exceed --records and --page-size must be positive".into(),
                ));
            }
            let spec = GenSpec {
                records,
                deleted,
                page_size,
                granularity: match granularity {
                    GranularityArg::Day => Granularity::Day,
                    GranularityArg::Seconds => Granularity::Seconds,
                },
            };
            let corpus = generate_corpus(seed, &spec);
            let json = serde_json::to_string_pretty(&corpus).map_err(Failure::op)?;
            std::fs::write(&out, json + "\n")
                .map_err(|e| Failure::op(format!("write {}: {e}", out.display())))
        }
    }
}

fn init_logging(level: LogLevel) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level.as_str()));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::op)
}

fn require_store(config: &Config) -> CliResult {
    if config.store_dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Operational(format!(
            "store {} is not initialized (run `mercury serve` or `mercury provider add` first)",
            config.store_dir.display()
        )))
    }
}

fn open_catalog(config: &Config) -> Result<Catalog, Failure> {
    Catalog::open_with_providers_file(&config.store_dir, config.providers_file.clone())
        .map_err(Failure::op)
}

fn provider(config: &Config, cmd: ProviderCommand) -> CliResult {
    match cmd {
        ProviderCommand::Add {
            provider_key,
            base_url,
            metadata_prefix,
            set,
            page_timeout,
        } => {
            let cfg = ProviderConfig {
                provider_key,
                base_url,
                metadata_prefix,
                set,
                page_timeout,
            };
            // Reject bad input before touching the store.
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let key = cfg.provider_key.clone();
            let created = open_catalog(config)?
                .put_provider(cfg)
                .map_err(|e| match e {
                    CatalogError::Config(e) => Failure::Usage(e.to_string()),
                    CatalogError::Store(e) => Failure::op(e),
                })?;
            println!(
                "{} provider {key}",
                if created { "added" } else { "updated" }
            );
            Ok(())
        }
        ProviderCommand::List { json } => {
            require_store(config)?;
            let catalog = open_catalog(config)?;
            let providers = catalog.providers().map_err(Failure::op)?;
            let mut states = catalog.harvest_states().map_err(Failure::op)?;
            if json {
                let entries: Vec<_> = providers
                    .into_iter()
                    .map(|config| {
                        let harvest_state =
                            states.remove(&config.provider_key).unwrap_or_else(|| {
                                mercury_core::harvest::HarvestState::new(&config.provider_key)
                            });
                        mercury_server::api::ProviderEntry {
                            config,
                            harvest_state,
                        }
                    })
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&entries).map_err(Failure::op)?
                );
                return Ok(());
            }
            if providers.is_empty() {
                println!("no providers configured");
            }
            for p in providers {
                let state = states.remove(&p.provider_key);
                let outcome = state
                    .as_ref()
                    .map(|s| serde_json::to_value(s.last_run_outcome).map_err(Failure::op))
                    .transpose()?
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_else(|| "never_run".into());
                let cursor = state
                    .and_then(|s| s.last_success_datestamp)
                    .map(mercury_core::time::format_instant)
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<16} {:<10} {:<26} {}",
                    p.provider_key, outcome, cursor, p.base_url
                );
            }
            Ok(())
        }
        ProviderCommand::Remove { provider_key } => {
            require_store(config)?;
            if open_catalog(config)?
                .remove_provider(&provider_key)
                .map_err(Failure::op)?
            {
                println!("removed provider {provider_key}");
                Ok(())
            } else {
                Err(Failure::Operational(format!(
                    "unknown provider {provider_key:?}"
                )))
            }
        }
    }
}

fn harvest(config: &Config, key: &str, full: bool, json: bool) -> CliResult {
    require_store(config)?;
    let catalog = open_catalog(config)?;
    let mode = if full {
        HarvestMode::Full
    } else {
        HarvestMode::Incremental
    };
    let transport = HttpTransport;
    let report = Harvester::new(&catalog, &transport)
        .harvest(key, mode)
        .map_err(|e| match e {
            HarvestError::UnknownProvider(_) => {
                Failure::Operational(format!("unknown provider {key:?}"))
            }
            other => Failure::op(other),
        })?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(Failure::op)?
        );
    } else {
        print!("{}", report_table(&report));
    }
    match report.error {
        Some(e) => Err(Failure::Operational(format!(
            "harvest of {key:?} failed: {e}"
        ))),
        None => Ok(()),
    }
}

fn report_table(r: &HarvestReport) -> String {
    let mode = match r.mode {
        HarvestMode::Full => "full",
        HarvestMode::Incremental => "incremental",
    };
    let rows: [(&str, String); 8] = [
        ("provider", r.provider_key.clone()),
        ("mode", mode.into()),
        ("pages", r.pages.to_string()),
        ("new", r.new.to_string()),
        ("updated", r.updated.to_string()),
        ("unchanged", r.unchanged.to_string()),
        ("deleted", r.deleted.to_string()),
        ("warnings", r.warnings.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k:<10} {v}\n")).collect()
}

fn search(config: &Config, args: &SearchArgs) -> CliResult {
    let params = args.params();
    params
        .to_query()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    require_store(config)?;
    let catalog = Catalog::open_read_only(&config.store_dir).map_err(Failure::op)?;
    let body = catalog
        .search_json(&params)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if args.json {
        let mut out = std::io::stdout().lock();
        out.write_all(body.as_bytes())
            .and_then(|()| out.flush())
            .map_err(Failure::op)?;
        return Ok(());
    }
    let result: SearchResult = serde_json::from_str(&body).map_err(Failure::op)?;
    println!(
        "{} matches (page {}, size {})",
        result.total, result.page, result.size
    );
    let first = (result.page as usize - 1) * result.size as usize;
    for (i, hit) in result.hits.iter().enumerate() {
        println!(
            "{:>4}. {:>8.4}  {}  [{}]",
            first + i + 1,
            hit.score,
            hit.title,
            hit.record_id
        );
    }
    Ok(())
}

fn reindex(config: &Config, compact: bool) -> CliResult {
    require_store(config)?;
    let catalog = open_catalog(config)?;
    if catalog.recovered_bytes() > 0 {
        println!(
            "truncated {} bytes of torn journal tail",
            catalog.recovered_bytes()
        );
    }
    let live = catalog.rebuild_index();
    if compact {
        catalog.compact().map_err(Failure::op)?;
        println!("compacted journal");
    }
    println!("live records: {live}");
    Ok(())
}

fn export(config: &Config, out: &Path) -> CliResult {
    require_store(config)?;
    let catalog = Catalog::open_read_only(&config.store_dir).map_err(Failure::op)?;
    let file =
        File::create(out).map_err(|e| Failure::op(format!("create {}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    let records = catalog.records();
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(Failure::op)?;
        w.write_all(b"\n").map_err(Failure::op)?;
    }
    w.flush().map_err(Failure::op)?;
    println!("exported {} records to {}", records.len(), out.display());
    Ok(())
}

fn import(config: &Config, file: &Path) -> CliResult {
    let reader = BufReader::new(
        File::open(file).map_err(|e| Failure::op(format!("open {}: {e}", file.display())))?,
    );
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(Failure::op)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetadataRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::op(format!("{}:{}: {e}", file.display(), n + 1)))?;
        records.push(record);
    }
    let catalog = open_catalog(config)?;
    let written = catalog.import_records(records).map_err(Failure::op)?;
    println!(
        "imported {written} records; live records: {}",
        catalog.len()
    );
    Ok(())
}

fn mock_provider(corpus: &Path, listen: &str) -> CliResult {
    let corpus = MockCorpus::load(corpus).map_err(Failure::op)?;
    let provider = Arc::new(MockProvider::new(corpus));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| Failure::op(format!("cannot listen on {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(Failure::op)?;
        println!(
            "mock provider serving http://{addr}{}",
            mercury_server::mock_server::OAI_PATH
        );
        std::io::stdout().flush().map_err(Failure::op)?;
        mercury_server::mock_server::serve_mock(provider, listener)
            .await
            .map_err(Failure::op)
    })
}
