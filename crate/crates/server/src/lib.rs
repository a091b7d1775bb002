//! HTTP layer of the Mercury metadata catalog: the search API, a
//! network transport for harvesting, and an HTTP wrapper around the mock
//! OAI-PMH provider.

pub mod api;
pub mod config;
pub mod mock_server;
pub mod transport;

use std::sync::Arc;

use mercury_core::catalog::Catalog;
use tokio::net::TcpListener;

pub use api::{router, ApiError, AppState};
pub use config::Config;
pub use transport::HttpTransport;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("cannot open store: {0}")]
    Store(#[from] mercury_core::store::StoreError),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Bind the listener, then replay the journal in the background while
/// answering 503, and serve until interrupted.
pub async fn serve(config: &Config) -> Result<(), ServeError> {
    let listener = TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
    tracing::info!(addr = %listener.local_addr()?, "search service listening");
    let state = Arc::new(AppState::new(Arc::new(HttpTransport)));
    let app = router(state.clone(), config.cors_origin.as_deref());

    let store_dir = config.store_dir.clone();
    let providers_file = config.providers_file.clone();
    let replay = tokio::task::spawn_blocking(move || {
        Catalog::open_with_providers_file(store_dir, providers_file)
    });

    let server = axum::serve(listener, app).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    });
    let server = tokio::spawn(async move { server.await });

    match replay.await {
        Ok(Ok(catalog)) => {
            tracing::info!(records = catalog.len(), "journal replay complete");
            state.set_catalog(Arc::new(catalog));
        }
        Ok(Err(e)) => {
            server.abort();
            return Err(e.into());
        }
        Err(e) => {
            server.abort();
            return Err(ServeError::Io(std::io::Error::other(e)));
        }
    }
    server.await.map_err(std::io::Error::other)??;
    Ok(())
}
