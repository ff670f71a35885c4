//! Master and worker runtimes.
//!
//! Each node runs one event loop that owns all mutable state. Connection
//! reader threads and a single processing thread feed it over a channel.

use std::collections::VecDeque;
use std::io;
use std::sync::mpsc::{self, Sender};
use std::thread;

use thiserror::Error;

use crate::analysis::{analyze_video, Analysis, AnalysisConfig, AnalysisError};
use crate::config::ConfigError;
use crate::dashcam::{CatalogError, DownloadError};
use crate::ledger::Clock;
use crate::metrics::MetricsError;
use crate::model::WorkloadManifest;
use crate::segment::SegmentError;

pub mod link;
pub mod master;
pub mod worker;

pub use master::{run_master, Master, MasterReport};
pub use worker::{run_worker, WorkerSummary};

/// A worker ships its own timing events for a unit in a file with this suffix.
pub const EVENTS_SUFFIX: &str = ".events.jsonl";
/// Work files sent to workers: `<unit>.json`.
pub const MANIFEST_SUFFIX: &str = ".json";

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Download(#[from] DownloadError),
    #[error("cannot reach master at {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("expected {expected} workers, only {connected} reported hardware info in time")]
    Workers { expected: usize, connected: usize },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// FIFO of outbound transfers with at most one in flight; the next one starts
/// only after the peer's COMPLETE.
#[derive(Debug, Clone)]
pub struct TransferQueue<T> {
    pending: VecDeque<T>,
    in_flight: Option<T>,
}

impl<T> Default for TransferQueue<T> {
    fn default() -> Self {
        TransferQueue { pending: VecDeque::new(), in_flight: None }
    }
}

impl<T> TransferQueue<T> {
    pub fn push(&mut self, item: T) {
        self.pending.push_back(item);
    }

    /// Moves the head into flight if nothing is in flight and returns it.
    pub fn start_next(&mut self) -> Option<&T> {
        if self.in_flight.is_some() {
            return None;
        }
        self.in_flight = Some(self.pending.pop_front()?);
        self.in_flight.as_ref()
    }

    /// The in-flight transfer was acknowledged.
    pub fn complete(&mut self) -> Option<T> {
        self.in_flight.take()
    }

    pub fn in_flight(&self) -> Option<&T> {
        self.in_flight.as_ref()
    }

    pub fn len(&self) -> usize {
        self.pending.len() + usize::from(self.in_flight.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Everything still queued or in flight, in-flight first.
    pub fn drain(&mut self) -> Vec<T> {
        self.in_flight.take().into_iter().chain(self.pending.drain(..)).collect()
    }
}

pub struct Job {
    pub unit: String,
    pub manifest: WorkloadManifest,
}

pub struct Processed {
    pub unit: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub outcome: Result<Analysis, AnalysisError>,
}

/// The node's processing thread: one video at a time, in arrival order.
pub fn spawn_processor<E: Send + 'static>(
    cfg: AnalysisConfig,
    clock: Clock,
    out: Sender<E>,
    wrap: fn(Processed) -> E,
) -> io::Result<Sender<Job>> {
    let (tx, rx) = mpsc::channel::<Job>();
    thread::Builder::new().name("processor".into()).spawn(move || {
        for job in rx {
            let start_ms = clock.now_ms();
            let outcome = analyze_video(&job.manifest, &cfg);
            let end_ms = clock.now_ms();
            if out.send(wrap(Processed { unit: job.unit, start_ms, end_ms, outcome })).is_err() {
                break;
            }
        }
    })?;
    Ok(tx)
}
