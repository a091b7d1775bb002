//! HTTP front end for [`MockProvider`].

use std::future::Future;
use std::sync::Arc;

use axum::extract::{RawQuery, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use mercury_core::mock::MockProvider;
use tokio::net::TcpListener;

/// Path the provider answers on.
pub const OAI_PATH: &str = "/oai";

async fn oai(State(provider): State<Arc<MockProvider>>, RawQuery(query): RawQuery) -> Response {
    let r = provider.respond(query.as_deref().unwrap_or(""));
    let mut response = (
        StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        [(header::CONTENT_TYPE, r.content_type())],
        r.body,
    )
        .into_response();
    if let Some(secs) = r.retry_after {
        response
            .headers_mut()
            .insert(header::RETRY_AFTER, HeaderValue::from(secs));
    }
    response
}

pub fn mock_router(provider: Arc<MockProvider>) -> Router {
    Router::new().route(OAI_PATH, get(oai)).with_state(provider)
}

/// Serve the provider on an already bound listener. The provider's echoed
/// base URL is set to the listener address before this returns, so it is
/// usable as soon as the future is spawned.
pub fn serve_mock(
    provider: Arc<MockProvider>,
    listener: TcpListener,
) -> impl Future<Output = std::io::Result<()>> + Send + 'static {
    let addr = listener.local_addr();
    if let Ok(addr) = &addr {
        provider.set_base_url(format!("http://{addr}{OAI_PATH}"));
    }
    async move {
        let addr = addr?;
        tracing::info!(%addr, "mock provider listening");
        axum::serve(listener, mock_router(provider)).await
    }
}
