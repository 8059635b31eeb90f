//! Serving side of toxscope: a registry of trained checkpoints, the
//! classify-and-explain HTTP API, and the external word-ranker client.

pub mod api;
pub mod ranker;
pub mod registry;

use std::future::Future;
use std::net::SocketAddr;

use thiserror::Error;
use tokio::net::TcpListener;

pub use api::{handle_classify, router, AppState, ClassifyRequest, ClassifyResponse};
pub use ranker::{RankSource, Ranker, RankerConfig, RankerMode};
pub use registry::{ModelSource, Registry};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("no model is ready to serve (pass --allow-empty to start anyway)")]
    NoReadyModel,
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Refuses to start with nothing servable unless explicitly allowed.
pub fn check_ready(registry: &Registry, allow_empty: bool) -> Result<(), ServeError> {
    if registry.ready_count() == 0 && !allow_empty {
        return Err(ServeError::NoReadyModel);
    }
    Ok(())
}

pub async fn bind(host: &str, port: u16) -> Result<TcpListener, ServeError> {
    let addr = format!("{host}:{port}");
    TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

/// Serves until `shutdown` resolves, then lets in-flight requests finish.
pub async fn run_server(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, models = state.registry.entries().len(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    tracing::info!("server stopped");
    Ok(())
}
