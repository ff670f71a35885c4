//! Master runtime: accept workers, download pairs, schedule, collect results,
//! and write the metrics report.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufWriter;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::link::{server_handshake, spawn_link, LinkEvent, LinkWriter};
use super::{spawn_processor, Job, NodeError, Processed, TransferQueue, EVENTS_SUFFIX, MANIFEST_SUFFIX};
use crate::config::{MasterConfig, SourceKind};
use crate::dashcam::{download_loop, DashCamCatalog, DownloadError, Downloaded, Downloader, LoopPlan, PairDownload, ServiceClient, VideoSource};
use crate::ledger::{read_event_log, write_event_log, Clock, EventKind, Ledger, Role, UnitRecord};
use crate::metrics::{aggregate, compute_metrics, write_csv, Aggregate, MetricsRow};
use crate::model::{Command, VideoKind, WorkloadManifest};
use crate::result::{ResultFile, RESULT_SUFFIX};
use crate::scheduler::{Assignment, DeviceState, DeviceTable, Target};
use crate::segment::{merge_results, split_video, SegmentResult};

enum Event {
    Connected { id: String, name: String, writer: LinkWriter },
    Link { id: String, event: LinkEvent },
    Pair(PairDownload),
    DownloadsDone(Result<usize, DownloadError>),
    Processed(Processed),
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct MasterReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
    pub ledger: Ledger,
    /// Final (merged) result per downloaded video.
    pub results: BTreeMap<String, ResultFile>,
    /// Every unit result as it reached the master, with the node that produced it.
    pub deliveries: Vec<(String, String)>,
    pub failed_downloads: Vec<String>,
    pub pairs_downloaded: usize,
    pub output_dir: PathBuf,
}

struct Unit {
    source: String,
    manifest: WorkloadManifest,
    command: Command,
    target: Target,
    done: bool,
}

struct Source {
    kind: VideoKind,
    duration_ms: u64,
    origin_frame_offset: u32,
    segments: usize,
    parts: Vec<SegmentResult>,
    done: bool,
}

struct Peer {
    name: String,
    writer: LinkWriter,
    queue: TransferQueue<String>,
}

/// A bound master, ready to run.
pub struct Master {
    cfg: MasterConfig,
    listener: TcpListener,
    source: Arc<dyn VideoSource>,
}

impl Master {
    pub fn bind(cfg: MasterConfig) -> Result<Self, NodeError> {
        cfg.validate()?;
        let source: Arc<dyn VideoSource> = match cfg.dashcam.source {
            SourceKind::Catalog => {
                let dir = cfg.dashcam.catalog_dir.as_deref().expect("validated");
                Arc::new(DashCamCatalog::from_dir(dir)?)
            }
            SourceKind::Service => {
                Arc::new(ServiceClient::new(cfg.dashcam.service_addr.as_deref().expect("validated"))?)
            }
        };
        Self::with_source(cfg, source)
    }

    pub fn with_source(cfg: MasterConfig, source: Arc<dyn VideoSource>) -> Result<Self, NodeError> {
        cfg.validate()?;
        let listener = TcpListener::bind(&cfg.listen)?;
        Ok(Master { cfg, listener, source })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn run(self) -> Result<MasterReport, NodeError> {
        let Master { cfg, listener, source } = self;
        let clock = Clock::new();
        let (tx, rx) = mpsc::channel();
        let addr = listener.local_addr()?;
        let stop_accept = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, cfg.name.clone(), clock, cfg.chunk_size, tx.clone(), stop_accept.clone())?;
        let local_jobs = spawn_processor(cfg.analysis.clone(), clock, tx.clone(), Event::Processed)?;
        let stop_downloads = Arc::new(AtomicBool::new(false));

        let mut run = Run::new(&cfg, clock, local_jobs)?;
        let outcome = run.event_loop(&rx, || {
            let downloader = Downloader::new(source.clone(), cfg.download_mode(), clock);
            let plan = LoopPlan {
                mode: cfg.loop_mode(),
                inter_pair_wait_ms: cfg.inter_pair_wait_ms(),
                pair_limit: Some(cfg.run.pairs),
            };
            let tx = tx.clone();
            let stop = stop_downloads.clone();
            thread::Builder::new().name("downloader".into()).spawn(move || {
                let res = download_loop(&downloader, &plan, &stop, |p| tx.send(Event::Pair(p)).is_ok());
                let _ = tx.send(Event::DownloadsDone(res));
            })
        });

        stop_downloads.store(true, Ordering::SeqCst);
        stop_accept.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
        let _ = acceptor.join();
        let pairs_downloaded = outcome?;
        // dropping the writers closes every worker connection
        run.peers.clear();
        run.finish(pairs_downloaded)
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    master: String,
    clock: Clock,
    chunk_size: usize,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
) -> std::io::Result<thread::JoinHandle<()>> {
    let names = Arc::new(Mutex::new(HashSet::from([master.clone()])));
    thread::Builder::new().name("acceptor".into()).spawn(move || {
        let mut next_id = 1u64;
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let mut stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = format!("ep-{next_id}");
            next_id += 1;
            let admit = |name: &str| {
                let mut names = names.lock().expect("name set lock");
                if names.insert(name.to_string()) {
                    Ok(())
                } else {
                    Err(format!("name {name} already in use"))
                }
            };
            let name = match server_handshake(&mut stream, &master, &id, admit) {
                Ok(n) => n,
                Err(e) => {
                    warn!("handshake failed: {e}");
                    continue;
                }
            };
            let link_id = id.clone();
            let writer = match spawn_link(stream, clock, chunk_size, tx.clone(), move |event| Event::Link {
                id: link_id.clone(),
                event,
            }) {
                Ok(w) => w,
                Err(e) => {
                    warn!("cannot start link for {name}: {e}");
                    continue;
                }
            };
            if tx.send(Event::Connected { id, name, writer }).is_err() {
                break;
            }
        }
    })
}

struct Run<'a> {
    cfg: &'a MasterConfig,
    clock: Clock,
    ledger: Ledger,
    table: DeviceTable,
    peers: BTreeMap<String, Peer>,
    units: BTreeMap<String, Unit>,
    sources: BTreeMap<String, Source>,
    results: BTreeMap<String, ResultFile>,
    deliveries: Vec<(String, String)>,
    failed_downloads: Vec<String>,
    local_jobs: Sender<Job>,
    results_dir: PathBuf,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a MasterConfig, clock: Clock, local_jobs: Sender<Job>) -> Result<Self, NodeError> {
        let results_dir = cfg.output_dir.join("results");
        fs::create_dir_all(&results_dir)?;
        let hw = cfg.hardware.resolve()?;
        Ok(Run {
            cfg,
            clock,
            ledger: Ledger::new(cfg.name.clone()),
            table: DeviceTable::new(DeviceState::new(Target::Local, cfg.name.clone(), hw)),
            peers: BTreeMap::new(),
            units: BTreeMap::new(),
            sources: BTreeMap::new(),
            results: BTreeMap::new(),
            deliveries: Vec::new(),
            failed_downloads: Vec::new(),
            local_jobs,
            results_dir,
        })
    }

    fn me(&self) -> &str {
        &self.cfg.name
    }

    fn event_loop<S>(&mut self, rx: &mpsc::Receiver<Event>, start_downloads: S) -> Result<usize, NodeError>
    where
        S: FnOnce() -> std::io::Result<thread::JoinHandle<()>>,
    {
        let wait_deadline = Instant::now() + Duration::from_millis(self.cfg.worker_wait_ms);
        let mut start_downloads = Some(start_downloads);
        let mut downloads_done: Option<usize> = None;
        loop {
            if start_downloads.is_some() && self.table.workers.len() >= self.cfg.expected_workers {
                info!("{} workers ready, starting downloads", self.table.workers.len());
                (start_downloads.take().expect("checked"))()?;
            }
            if let Some(n) = downloads_done {
                if self.sources.values().all(|s| s.done) {
                    return Ok(n);
                }
            }
            let ev = if start_downloads.is_some() {
                let left = wait_deadline.saturating_duration_since(Instant::now());
                match rx.recv_timeout(left) {
                    Ok(ev) => ev,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(NodeError::Workers {
                            expected: self.cfg.expected_workers,
                            connected: self.table.workers.len(),
                        })
                    }
                    Err(RecvTimeoutError::Disconnected) => unreachable!("the loop holds a sender"),
                }
            } else {
                rx.recv().expect("the loop holds a sender")
            };
            match ev {
                Event::Connected { id, name, writer } => {
                    info!("worker {name} connected as {id}");
                    writer.send_command(Command::HwInfoRequest);
                    self.peers.insert(id, Peer { name, writer, queue: TransferQueue::default() });
                }
                Event::Link { id, event } => self.on_link(&id, event)?,
                Event::Pair(p) => self.on_pair(p)?,
                Event::DownloadsDone(res) => downloads_done = Some(res?),
                Event::Processed(p) => self.on_local_result(p)?,
            }
        }
    }

    fn record(&mut self, t_ms: u64, video: &str, event: EventKind) {
        let me = self.cfg.name.clone();
        self.ledger.record(t_ms, &me, video, event);
    }

    fn on_pair(&mut self, p: PairDownload) -> Result<(), NodeError> {
        let mut ok: Vec<WorkloadManifest> = Vec::new();
        for member in [p.outer, p.inner] {
            match member {
                Ok(Downloaded { manifest, start_ms, end_ms }) => {
                    self.record(start_ms, &manifest.name, EventKind::DownloadStart);
                    self.record(end_ms, &manifest.name, EventKind::DownloadEnd);
                    ok.push(manifest);
                }
                Err(e) => {
                    warn!("pair {}: {e}", p.index);
                    self.failed_downloads.push(e.to_string());
                }
            }
        }
        let assignments = match ok.as_slice() {
            [outer, inner] => self.table.schedule_pair(&outer.name, &inner.name, self.cfg.policy()),
            [single] => vec![Assignment {
                video_name: single.name.clone(),
                target: self.table.schedule_single(),
                command: Command::Analyse,
                segment_count: 1,
            }],
            _ => Vec::new(),
        };
        for m in ok {
            let mine: Vec<&Assignment> = assignments
                .iter()
                .filter(|a| a.video_name == m.name || crate::segment::segment_index(&m.name, &a.video_name).is_some())
                .collect();
            let segments = mine.first().map_or(1, |a| a.segment_count);
            let units: Vec<(WorkloadManifest, Target, Command)> = if segments > 1 {
                match split_video(&m, segments) {
                    Ok(parts) => parts
                        .into_iter()
                        .zip(&mine)
                        .map(|(part, a)| (part, a.target.clone(), Command::Segment))
                        .collect(),
                    Err(e) => {
                        warn!("{e}; analysing `{}` whole", m.name);
                        vec![(m.clone(), mine[0].target.clone(), Command::Analyse)]
                    }
                }
            } else {
                let target = mine.first().map_or(Target::Local, |a| a.target.clone());
                vec![(m.clone(), target, Command::Analyse)]
            };
            self.sources.insert(
                m.name.clone(),
                Source {
                    kind: m.kind,
                    duration_ms: m.duration_ms,
                    origin_frame_offset: m.origin_frame_offset,
                    segments: units.len(),
                    parts: Vec::new(),
                    done: false,
                },
            );
            for (manifest, target, command) in units {
                let name = manifest.name.clone();
                self.units
                    .insert(name.clone(), Unit { source: m.name.clone(), manifest, command, target, done: false });
                self.dispatch(&name)?;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, unit: &str) -> Result<(), NodeError> {
        let u = self.units.get(unit).expect("dispatching a known unit");
        let target = u.target.clone();
        if self.table.on_assigned(&target).is_err() {
            // device vanished between scheduling and dispatch
            let fallback = self.table.schedule_single();
            self.units.get_mut(unit).expect("known unit").target = fallback.clone();
            self.table.on_assigned(&fallback).map_err(|e| NodeError::Protocol(e.to_string()))?;
            return self.send_to(unit, &fallback);
        }
        self.send_to(unit, &target)
    }

    fn send_to(&mut self, unit: &str, target: &Target) -> Result<(), NodeError> {
        match target {
            Target::Local => {
                let now = self.clock.now_ms();
                self.record(now, unit, EventKind::ReceivedByProcessor);
                let manifest = self.units[unit].manifest.clone();
                self.local_jobs
                    .send(Job { unit: unit.to_string(), manifest })
                    .map_err(|_| NodeError::Protocol("local processor stopped".into()))?;
            }
            Target::Remote(id) => {
                let peer = self.peers.get_mut(id).expect("scheduled on a connected peer");
                debug!("queueing {unit} for {}", peer.name);
                peer.queue.push(unit.to_string());
                self.start_transfer(id);
            }
        }
        Ok(())
    }

    fn start_transfer(&mut self, id: &str) {
        let Some(peer) = self.peers.get_mut(id) else {
            return;
        };
        let Some(unit) = peer.queue.start_next().cloned() else {
            return;
        };
        let u = &self.units[&unit];
        let content = u.manifest.to_json();
        peer.writer.send_file(u.command, &format!("{unit}{MANIFEST_SUFFIX}"), content);
        let now = self.clock.now_ms();
        self.record(now, &unit, EventKind::TransferStart);
    }

    fn on_link(&mut self, id: &str, event: LinkEvent) -> Result<(), NodeError> {
        if !self.peers.contains_key(id) {
            debug!("event from unknown endpoint {id}: {event:?}");
            return Ok(());
        }
        match event {
            LinkEvent::HardwareInfo(hw) => {
                let name = self.peers[id].name.clone();
                info!("{name}: {hw:?}");
                self.table.add_worker(DeviceState::new(Target::Remote(id.to_string()), name, hw));
            }
            LinkEvent::Command(Command::Complete) => {
                let done = self.peers.get_mut(id).and_then(|p| p.queue.complete());
                match done {
                    Some(unit) => {
                        let now = self.clock.now_ms();
                        self.record(now, &unit, EventKind::TransferEnd);
                    }
                    None => warn!("{id}: COMPLETE with nothing in flight"),
                }
                self.start_transfer(id);
            }
            LinkEvent::Command(other) => warn!("{id}: ignoring standalone {other}"),
            LinkEvent::File { file, announced_ms, completed_ms } => {
                self.peers[id].writer.send_command(Command::Complete);
                if file.command != Command::Return {
                    warn!("{id}: ignoring {} file `{}`", file.command, file.filename);
                } else if let Some(unit) = file.filename.strip_suffix(EVENTS_SUFFIX) {
                    self.on_worker_events(id, unit, &file.content)?;
                } else if let Some(unit) = file.filename.strip_suffix(RESULT_SUFFIX) {
                    self.on_worker_result(id, unit, &file.content, announced_ms, completed_ms)?;
                } else {
                    warn!("{id}: ignoring returned file `{}`", file.filename);
                }
            }
            LinkEvent::Closed { reason } => self.on_disconnect(id, reason)?,
        }
        Ok(())
    }

    fn expect_unit_on(&self, id: &str, unit: &str) -> Result<(), NodeError> {
        match self.units.get(unit) {
            Some(u) if u.target == Target::Remote(id.to_string()) && !u.done => Ok(()),
            _ => Err(NodeError::Protocol(format!("{id} returned `{unit}`, which it was not processing"))),
        }
    }

    fn on_worker_events(&mut self, id: &str, unit: &str, content: &[u8]) -> Result<(), NodeError> {
        self.expect_unit_on(id, unit)?;
        let events = read_event_log(content).map_err(|e| NodeError::Protocol(format!("events for `{unit}`: {e}")))?;
        let name = &self.peers[id].name;
        if let Some(e) = events.iter().find(|e| &e.node != name || e.video != unit) {
            return Err(NodeError::Protocol(format!("{name} sent a foreign event {e:?}")));
        }
        self.ledger.extend(events);
        Ok(())
    }

    fn on_worker_result(
        &mut self,
        id: &str,
        unit: &str,
        content: &[u8],
        announced_ms: u64,
        completed_ms: u64,
    ) -> Result<(), NodeError> {
        self.expect_unit_on(id, unit)?;
        let kind = self.units[unit].manifest.kind;
        let result = ResultFile::parse(unit, kind, content).map_err(|e| NodeError::Protocol(e.to_string()))?;
        self.record(announced_ms, unit, EventKind::ResultReturnStart);
        self.record(completed_ms, unit, EventKind::ResultReturnEnd);
        let now = self.clock.now_ms();
        self.record(now, unit, EventKind::ResultReceivedByMaster);
        let target = Target::Remote(id.to_string());
        self.table.on_worker_result(&target).map_err(|e| NodeError::Protocol(e.to_string()))?;
        let name = self.peers[id].name.clone();
        self.on_result(unit, result, &name, Role::Worker)
    }

    fn on_local_result(&mut self, p: Processed) -> Result<(), NodeError> {
        let analysis = p.outcome?;
        self.record(p.start_ms, &p.unit, EventKind::ProcessingStart);
        self.record(p.end_ms, &p.unit, EventKind::ProcessingEnd);
        let now = self.clock.now_ms();
        self.record(now, &p.unit, EventKind::ResultReceivedByMaster);
        self.table.on_worker_result(&Target::Local).map_err(|e| NodeError::Protocol(e.to_string()))?;
        let me = self.me().to_string();
        self.on_result(&p.unit, analysis.result, &me, Role::Master)
    }

    fn on_result(&mut self, unit: &str, result: ResultFile, node: &str, role: Role) -> Result<(), NodeError> {
        let u = self.units.get_mut(unit).expect("result for a known unit");
        u.done = true;
        let source_name = u.source.clone();
        let src = self.sources.get_mut(&source_name).expect("unit of a known source");
        let frames_total = u.manifest.frames.len();
        self.ledger.upsert_unit(UnitRecord {
            unit: unit.to_string(),
            source_video: source_name.clone(),
            kind: src.kind,
            node: node.to_string(),
            role,
            duration_ms: src.duration_ms,
            frames_total,
            frames_skipped: frames_total - result.body.len(),
        });
        self.deliveries.push((unit.to_string(), node.to_string()));
        let offset = u.manifest.origin_frame_offset - src.origin_frame_offset;
        src.parts.push(SegmentResult { result, origin_frame_offset: offset });
        if src.parts.len() < src.segments {
            return Ok(());
        }
        let parts = std::mem::take(&mut src.parts);
        let merged = if src.segments == 1 && parts[0].result.name == source_name {
            parts.into_iter().next().expect("one part").result
        } else {
            merge_results(parts, &source_name, src.segments)?
        };
        src.done = true;
        fs::write(self.results_dir.join(merged.file_name()), merged.serialize())?;
        self.results.insert(source_name, merged);
        Ok(())
    }

    fn on_disconnect(&mut self, id: &str, reason: Option<String>) -> Result<(), NodeError> {
        let Some(mut peer) = self.peers.remove(id) else {
            return Ok(());
        };
        match &reason {
            Some(r) => warn!("worker {} lost: {r}", peer.name),
            None => info!("worker {} disconnected", peer.name),
        }
        peer.queue.drain();
        self.table.remove_worker(id);
        let target = Target::Remote(id.to_string());
        let orphans: Vec<String> =
            self.units.iter().filter(|(_, u)| u.target == target && !u.done).map(|(n, _)| n.clone()).collect();
        for unit in orphans {
            self.ledger.reset_unit(&unit);
            let to = self.table.schedule_single();
            warn!("reassigning {unit} from {} to {:?}", peer.name, to);
            self.units.get_mut(&unit).expect("orphan is known").target = to;
            self.dispatch(&unit)?;
        }
        Ok(())
    }

    fn finish(self, pairs_downloaded: usize) -> Result<MasterReport, NodeError> {
        let rows = compute_metrics(&self.ledger)?;
        let agg = aggregate(&rows, Some(self.cfg.run.granularity_ms));
        let out = &self.cfg.output_dir;
        write_csv(BufWriter::new(fs::File::create(out.join("metrics.csv"))?), &rows)?;
        fs::write(out.join("aggregate.json"), serde_json::to_vec_pretty(&agg).expect("aggregate serializes"))?;
        write_event_log(BufWriter::new(fs::File::create(out.join("events.jsonl"))?), &self.ledger.events)?;
        info!(
            "run complete: {} videos, average turnaround {:.0} ms, skip rate {:.3}",
            rows.len(),
            agg.avg_turnaround_ms,
            agg.skip_rate
        );
        Ok(MasterReport {
            rows,
            aggregate: agg,
            ledger: self.ledger,
            results: self.results,
            deliveries: self.deliveries,
            failed_downloads: self.failed_downloads,
            pairs_downloaded,
            output_dir: out.clone(),
        })
    }
}

/// Binds and runs a master from its configuration.
pub fn run_master(cfg: MasterConfig) -> Result<MasterReport, NodeError> {
    Master::bind(cfg)?.run()
}
