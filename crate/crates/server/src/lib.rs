//! HTTP front end for the node power controller.
//!
//! [`prepare`] builds the simulated bus from a [`Config`], starts the bus
//! owner thread and optionally scans the bus; [`serve`] runs the API on a
//! bound listener until the shutdown future resolves.

pub mod api;
pub mod worker;

use std::future::Future;
use std::time::Duration;

use axum::Router;
use nodepower_core::config::Config;
use nodepower_core::{MasterService, ServiceError};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::api::AppState;
use crate::worker::{BusWorker, WorkerGone};

/// Actor recorded for scans the server starts on its own.
pub const SYSTEM_ACTOR: &str = "system";

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Worker(#[from] WorkerGone),
}

pub async fn prepare(config: &Config) -> Result<(Router, BusWorker), StartError> {
    let service = MasterService::from_config(config)?;
    let (worker, _thread) = BusWorker::spawn(service);
    if config.server.scan_on_start {
        let found = worker.run(|s| s.scan_bus(SYSTEM_ACTOR, 1, 254)).await??;
        tracing::info!(nodes = found.len(), "startup scan finished");
    }
    if let Some(ms) = config.server.poll_interval_ms.filter(|&ms| ms > 0) {
        let poller = worker.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(ms));
            tick.tick().await;
            loop {
                tick.tick().await;
                match poller.run(|s| s.poll_registered()).await {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => tracing::warn!(error = %e, "status poll failed"),
                    Err(_) => break,
                }
            }
        });
    }
    let mut router = api::router(AppState {
        worker: worker.clone(),
    });
    if let Some(dir) = &config.server.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    Ok((router, worker))
}

pub async fn serve<F>(listener: TcpListener, router: Router, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
}
