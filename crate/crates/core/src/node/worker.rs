//! Worker runtime: connect, announce hardware, analyse what arrives, return results.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::link::{client_handshake, spawn_link, LinkEvent, LinkWriter};
use super::{spawn_processor, Job, NodeError, Processed, TransferQueue, EVENTS_SUFFIX};
use crate::config::WorkerConfig;
use crate::ledger::{encode_event_log, Clock, EventKind, LedgerEvent};
use crate::model::{Command, WorkloadManifest};
use crate::result::result_file_name;

enum Event {
    Link(LinkEvent),
    Processed(Processed),
}

#[derive(Debug, Clone, Default)]
pub struct WorkerSummary {
    pub master: String,
    pub endpoint_id: String,
    pub processed: usize,
    /// Everything this worker recorded, on its own clock.
    pub events: Vec<LedgerEvent>,
}

struct Outgoing {
    filename: String,
    content: Vec<u8>,
}

fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, NodeError> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = addr
            .to_socket_addrs()
            .and_then(|mut a| a.next().ok_or_else(|| std::io::Error::other("address resolves to nothing")))
            .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2)));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(NodeError::Connect { addr: addr.to_string(), reason: e.to_string() })
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn start_next(queue: &mut TransferQueue<Outgoing>, writer: &LinkWriter) {
    if let Some(o) = queue.start_next() {
        writer.send_file(Command::Return, &o.filename, o.content.clone());
    }
}

/// Runs until the master closes the connection. Queued work is discarded then.
pub fn run_worker(cfg: &WorkerConfig) -> Result<WorkerSummary, NodeError> {
    cfg.validate()?;
    let hw = cfg.hardware.resolve()?;
    let clock = Clock::new();
    let mut stream = connect(&cfg.master, Duration::from_millis(cfg.connect_timeout_ms))?;
    let (master, endpoint_id) =
        client_handshake(&mut stream, &cfg.name).map_err(|e| NodeError::Connect {
            addr: cfg.master.clone(),
            reason: e.to_string(),
        })?;
    info!("{} connected to {master} as {endpoint_id}", cfg.name);

    let (tx, rx) = mpsc::channel();
    let writer = spawn_link(stream, clock, cfg.chunk_size, tx.clone(), Event::Link)?;
    let jobs = spawn_processor(cfg.analysis.clone(), clock, tx, Event::Processed)?;

    let me = cfg.name.as_str();
    let mut summary = WorkerSummary { master, endpoint_id, ..Default::default() };
    let mut outbound: TransferQueue<Outgoing> = TransferQueue::default();
    let mut pending_received: Vec<(String, u64)> = Vec::new();
    let event = |t_ms, video: &str, event| LedgerEvent { t_ms, node: me.to_string(), video: video.to_string(), event };

    for ev in rx {
        match ev {
            Event::Link(LinkEvent::Command(Command::HwInfoRequest)) => writer.send_hardware_info(&hw),
            Event::Link(LinkEvent::Command(Command::Complete)) => {
                outbound.complete();
                start_next(&mut outbound, &writer);
            }
            Event::Link(LinkEvent::Command(other)) => warn!("{me}: ignoring standalone {other}"),
            Event::Link(LinkEvent::HardwareInfo(_)) => warn!("{me}: ignoring unsolicited hardware info"),
            Event::Link(LinkEvent::File { file, completed_ms, .. }) => {
                writer.send_command(Command::Complete);
                if !matches!(file.command, Command::Analyse | Command::Segment) {
                    warn!("{me}: ignoring {} file `{}`", file.command, file.filename);
                    continue;
                }
                let manifest = WorkloadManifest::from_json(&file.content)
                    .map_err(|e| NodeError::Protocol(format!("file `{}`: {e}", file.filename)))?;
                pending_received.push((manifest.name.clone(), completed_ms));
                summary.events.push(event(completed_ms, &manifest.name, EventKind::ReceivedByProcessor));
                if jobs.send(Job { unit: manifest.name.clone(), manifest }).is_err() {
                    break;
                }
            }
            Event::Link(LinkEvent::Closed { reason }) => {
                match reason {
                    Some(r) => warn!("{me}: master connection lost: {r}"),
                    None => info!("{me}: master closed the connection"),
                }
                break;
            }
            Event::Processed(p) => {
                let analysis = p.outcome?;
                summary.processed += 1;
                let unit = p.unit;
                let mut shipped = Vec::with_capacity(3);
                if let Some(pos) = pending_received.iter().position(|(u, _)| *u == unit) {
                    let (_, t) = pending_received.remove(pos);
                    shipped.push(event(t, &unit, EventKind::ReceivedByProcessor));
                }
                shipped.push(event(p.start_ms, &unit, EventKind::ProcessingStart));
                shipped.push(event(p.end_ms, &unit, EventKind::ProcessingEnd));
                summary.events.extend_from_slice(&shipped[1..]);
                // timing first, so the master holds it by the time the result lands
                outbound.push(Outgoing { filename: format!("{unit}{EVENTS_SUFFIX}"), content: encode_event_log(&shipped) });
                outbound.push(Outgoing { filename: result_file_name(&unit), content: analysis.bytes });
                start_next(&mut outbound, &writer);
            }
        }
    }
    Ok(summary)
}
