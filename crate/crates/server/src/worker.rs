//! The bus-owner thread.
//!
//! Every operation that touches the bus runs on one dedicated thread, taken
//! from a FIFO queue in arrival order. After each job the registry is
//! republished so readers never wait behind a transaction.

use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread;

use nodepower_core::registry::Registry;
use nodepower_core::MasterService;
use tokio::sync::oneshot;

type Job = Box<dyn FnOnce(&mut MasterService, &RwLock<Registry>) + Send>;

// The registry is republished before the caller hears back, so a read that
// follows a reply always sees its effect.
fn publish(service: &MasterService, registry: &RwLock<Registry>) {
    let snapshot = service.registry().clone();
    *registry.write().unwrap_or_else(|e| e.into_inner()) = snapshot;
}

#[derive(Debug, thiserror::Error)]
#[error("bus worker has stopped")]
pub struct WorkerGone;

#[derive(Clone)]
pub struct BusWorker {
    queue: mpsc::Sender<Job>,
    registry: Arc<RwLock<Registry>>,
}

impl BusWorker {
    pub fn spawn(service: MasterService) -> (BusWorker, thread::JoinHandle<()>) {
        let (tx, rx) = mpsc::channel::<Job>();
        let registry = Arc::new(RwLock::new(service.registry().clone()));
        let published = Arc::clone(&registry);
        let handle = thread::Builder::new()
            .name("bus-owner".into())
            .spawn(move || {
                let mut service = service;
                for job in rx {
                    job(&mut service, &published);
                }
            })
            .expect("spawning bus worker");
        (
            BusWorker {
                queue: tx,
                registry,
            },
            handle,
        )
    }

    /// Queues `f` behind everything already submitted and waits for it.
    pub async fn run<T, F>(&self, f: F) -> Result<T, WorkerGone>
    where
        T: Send + 'static,
        F: FnOnce(&mut MasterService) -> T + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.queue
            .send(Box::new(move |svc, registry| {
                let out = f(svc);
                publish(svc, registry);
                let _ = tx.send(out);
            }))
            .map_err(|_| WorkerGone)?;
        rx.await.map_err(|_| WorkerGone)
    }

    /// Blocking variant for callers outside the async runtime.
    pub fn run_blocking<T, F>(&self, f: F) -> Result<T, WorkerGone>
    where
        T: Send + 'static,
        F: FnOnce(&mut MasterService) -> T + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        self.queue
            .send(Box::new(move |svc, registry| {
                let out = f(svc);
                publish(svc, registry);
                let _ = tx.send(out);
            }))
            .map_err(|_| WorkerGone)?;
        rx.recv().map_err(|_| WorkerGone)
    }

    /// Registry as of the last finished job.
    pub fn registry(&self) -> Registry {
        self.registry
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}
