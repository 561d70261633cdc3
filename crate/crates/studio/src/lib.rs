//! HTTP backend for the interactive multi-step filter workflow: image
//! slices, marker upload, background candidate runs, activation previews,
//! filter selection and encoder export.

pub mod error;
pub mod image;
pub mod routes;
pub mod state;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use error::{ApiError, ApiResult};
pub use routes::router;
pub use state::{RunStatus, Studio, StudioConfig};

/// Serves until interrupted.
pub async fn serve(cfg: StudioConfig, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let studio = Studio::open(cfg).map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(studio, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
