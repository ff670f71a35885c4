//! The dash cam: an emulated file service plus the master's download side.
//!
//! The service speaks a tiny HTTP/1.0 subset. `GET /videos` returns one
//! `name kind sequence` line per recorded video and `GET /videos/<name>`
//! returns the manifest bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::ledger::Clock;
use crate::model::{ManifestError, VideoKind, WorkloadManifest};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog i/o at {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("catalog file {path}: {source}")]
    Manifest { path: String, source: ManifestError },
    #[error("video name `{0}` appears more than once")]
    DuplicateName(String),
    #[error("video `{0}` has no numeric pair index suffix")]
    NoPairIndex(String),
    #[error("pair {index} is missing its {missing} video")]
    UnmatchedPair { index: u32, missing: VideoKind },
    #[error("pair {index} has more than one {kind} video")]
    CrowdedPair { index: u32, kind: VideoKind },
}

#[derive(Debug, Error)]
pub enum DownloadError {
    #[error("dash cam unreachable: {0}")]
    Unreachable(#[source] io::Error),
    #[error("dash cam answered {status} for {path}")]
    Status { status: u16, path: String },
    #[error("malformed dash cam response: {0}")]
    Malformed(String),
    #[error("video `{0}` is not on the dash cam")]
    NotFound(String),
    #[error("video `{name}`: {source}")]
    Manifest { name: String, source: ManifestError },
}

/// Trailing `_<digits>` of a video name; outer and inner videos of one pair share it.
pub fn pair_index(name: &str) -> Option<u32> {
    let (_, digits) = name.rsplit_once('_')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingEntry {
    pub name: String,
    pub kind: VideoKind,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: String,
    pub kind: VideoKind,
    pub sequence: u64,
    pub content: Vec<u8>,
}

/// Videos "recorded" by the dash cam, in recording order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DashCamCatalog {
    videos: Vec<CatalogEntry>,
}

impl DashCamCatalog {
    /// Orders pairs by index, outer before inner, and numbers them in that order.
    pub fn from_manifests(manifests: Vec<WorkloadManifest>) -> Result<Self, CatalogError> {
        let mut slots: BTreeMap<u32, [Option<WorkloadManifest>; 2]> = BTreeMap::new();
        let mut names = BTreeSet::new();
        for m in manifests {
            if !names.insert(m.name.clone()) {
                return Err(CatalogError::DuplicateName(m.name));
            }
            let index = pair_index(&m.name).ok_or_else(|| CatalogError::NoPairIndex(m.name.clone()))?;
            let slot = &mut slots.entry(index).or_default()[kind_slot(m.kind)];
            if slot.is_some() {
                return Err(CatalogError::CrowdedPair { index, kind: m.kind });
            }
            *slot = Some(m);
        }
        let mut videos = Vec::with_capacity(names.len());
        for (index, [outer, inner]) in slots {
            let (Some(outer), Some(inner)) = (outer.as_ref(), inner.as_ref()) else {
                let missing = if outer.is_none() { VideoKind::Outer } else { VideoKind::Inner };
                return Err(CatalogError::UnmatchedPair { index, missing });
            };
            for m in [outer, inner] {
                videos.push(CatalogEntry {
                    name: m.name.clone(),
                    kind: m.kind,
                    sequence: videos.len() as u64,
                    content: m.to_json(),
                });
            }
        }
        Ok(DashCamCatalog { videos })
    }

    /// Loads every `*.json` manifest in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, CatalogError> {
        let io_err = |path: &Path, source| CatalogError::Io { path: path.display().to_string(), source };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        let mut manifests = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            let m = WorkloadManifest::from_json(&bytes)
                .map_err(|source| CatalogError::Manifest { path: path.display().to_string(), source })?;
            manifests.push(m);
        }
        Self::from_manifests(manifests)
    }

    pub fn videos(&self) -> &[CatalogEntry] {
        &self.videos
    }

    pub fn listing(&self) -> Vec<ListingEntry> {
        self.videos
            .iter()
            .map(|v| ListingEntry { name: v.name.clone(), kind: v.kind, sequence: v.sequence })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        self.videos.iter().find(|v| v.name == name)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

fn kind_slot(kind: VideoKind) -> usize {
    match kind {
        VideoKind::Outer => 0,
        VideoKind::Inner => 1,
    }
}

pub fn format_listing(entries: &[ListingEntry]) -> String {
    entries.iter().map(|e| format!("{} {} {}\n", e.name, e.kind.as_str(), e.sequence)).collect()
}

pub fn parse_listing(text: &str) -> Result<Vec<ListingEntry>, DownloadError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || DownloadError::Malformed(format!("listing line `{line}`"));
            let mut fields = line.split(' ');
            let (Some(name), Some(kind), Some(seq), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad());
            };
            Ok(ListingEntry {
                name: name.to_string(),
                kind: kind.parse().map_err(|_| bad())?,
                sequence: seq.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Names already pulled from the dash cam during this run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DownloadRecord {
    downloaded: BTreeSet<String>,
}

impl DownloadRecord {
    pub fn insert(&mut self, name: &str) {
        self.downloaded.insert(name.to_string());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.downloaded.contains(name)
    }

    pub fn len(&self) -> usize {
        self.downloaded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.downloaded.is_empty()
    }
}

/// Listing entries not yet downloaded, oldest first.
pub fn new_videos(listing: &[ListingEntry], record: &DownloadRecord) -> Vec<ListingEntry> {
    let mut fresh: Vec<ListingEntry> = listing.iter().filter(|e| !record.contains(&e.name)).cloned().collect();
    fresh.sort_by_key(|e| e.sequence);
    fresh
}

/// Outer and inner names of one pair, as found in a listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub index: u32,
    pub outer: Option<String>,
    pub inner: Option<String>,
}

/// Groups listing entries into pairs, ordered by each pair's oldest member.
/// Entries without a pair index are dropped.
pub fn group_pairs(entries: &[ListingEntry]) -> Vec<PairRef> {
    let mut sorted: Vec<&ListingEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.sequence);
    let mut pairs: Vec<PairRef> = Vec::new();
    for e in sorted {
        let Some(index) = pair_index(&e.name) else {
            continue;
        };
        let pos = match pairs.iter().position(|p| p.index == index) {
            Some(pos) => pos,
            None => {
                pairs.push(PairRef { index, outer: None, inner: None });
                pairs.len() - 1
            }
        };
        let slot = match e.kind {
            VideoKind::Outer => &mut pairs[pos].outer,
            VideoKind::Inner => &mut pairs[pos].inner,
        };
        slot.get_or_insert_with(|| e.name.clone());
    }
    pairs
}

/// Where video bytes come from.
pub trait VideoSource: Send + Sync {
    fn list(&self) -> Result<Vec<ListingEntry>, DownloadError>;
    fn fetch(&self, name: &str) -> Result<Vec<u8>, DownloadError>;
}

impl VideoSource for DashCamCatalog {
    fn list(&self) -> Result<Vec<ListingEntry>, DownloadError> {
        Ok(self.listing())
    }

    fn fetch(&self, name: &str) -> Result<Vec<u8>, DownloadError> {
        self.get(name).map(|v| v.content.clone()).ok_or_else(|| DownloadError::NotFound(name.to_string()))
    }
}

const IO_TIMEOUT: Duration = Duration::from_secs(10);

/// Client for a running dash-cam service.
#[derive(Debug, Clone)]
pub struct ServiceClient {
    addr: SocketAddr,
}

impl ServiceClient {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self, DownloadError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(DownloadError::Unreachable)?
            .next()
            .ok_or_else(|| DownloadError::Malformed("address resolves to nothing".into()))?;
        Ok(ServiceClient { addr })
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, DownloadError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, IO_TIMEOUT).map_err(DownloadError::Unreachable)?;
        stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(DownloadError::Unreachable)?;
        stream
            .write_all(format!("GET {path} HTTP/1.0\r\nHost: dashcam\r\n\r\n").as_bytes())
            .map_err(DownloadError::Unreachable)?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(DownloadError::Unreachable)?;
        let (status, body) = split_response(&raw)?;
        match status {
            200 => Ok(body),
            404 => Err(DownloadError::NotFound(path.rsplit('/').next().unwrap_or(path).to_string())),
            status => Err(DownloadError::Status { status, path: path.to_string() }),
        }
    }
}

fn split_response(raw: &[u8]) -> Result<(u16, Vec<u8>), DownloadError> {
    let malformed = |what: &str| DownloadError::Malformed(what.to_string());
    let head_end = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or_else(|| malformed("no header terminator"))?;
    let head = std::str::from_utf8(&raw[..head_end]).map_err(|_| malformed("non-UTF-8 header"))?;
    let mut lines = head.split("\r\n");
    let status = lines
        .next()
        .and_then(|l| l.split(' ').nth(1))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("bad status line"))?;
    let body = raw[head_end + 4..].to_vec();
    for line in lines {
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                let len: usize = v.trim().parse().map_err(|_| malformed("bad content-length"))?;
                if len != body.len() {
                    return Err(malformed("truncated body"));
                }
            }
        }
    }
    Ok((status, body))
}

impl VideoSource for ServiceClient {
    fn list(&self) -> Result<Vec<ListingEntry>, DownloadError> {
        let body = self.get("/videos")?;
        let text = String::from_utf8(body).map_err(|_| DownloadError::Malformed("non-UTF-8 listing".into()))?;
        parse_listing(&text)
    }

    fn fetch(&self, name: &str) -> Result<Vec<u8>, DownloadError> {
        self.get(&format!("/videos/{name}"))
    }
}

/// A running dash-cam service. Stops when dropped.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.shutdown();
        }
    }
}

pub fn serve(addr: impl ToSocketAddrs, catalog: DashCamCatalog) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let catalog = Arc::new(catalog);
    let flag = stop.clone();
    let thread = thread::Builder::new().name("dashcam".into()).spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let catalog = catalog.clone();
                    thread::spawn(move || {
                        if let Err(e) = handle_request(stream, &catalog) {
                            debug!("dash cam request failed: {e}");
                        }
                    });
                }
                Err(e) => warn!("dash cam accept failed: {e}"),
            }
        }
    })?;
    Ok(ServiceHandle { addr, stop, thread: Some(thread) })
}

fn handle_request(stream: TcpStream, catalog: &DashCamCatalog) -> io::Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header.trim().is_empty() {
            break;
        }
    }
    let mut parts = request_line.split_whitespace();
    let (status, body) = match (parts.next(), parts.next()) {
        (Some("GET"), Some("/videos")) => (200, format_listing(&catalog.listing()).into_bytes()),
        (Some("GET"), Some(path)) => match path.strip_prefix("/videos/").and_then(|n| catalog.get(n)) {
            Some(v) => (200, v.content.clone()),
            None => (404, b"not found\n".to_vec()),
        },
        (Some(_), Some(_)) => (405, b"method not allowed\n".to_vec()),
        _ => (400, b"bad request\n".to_vec()),
    };
    let reason = match status {
        200 => "OK",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Bad Request",
    };
    let mut out = stream;
    write!(out, "HTTP/1.0 {status} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len())?;
    out.write_all(&body)?;
    out.flush()?;
    out.shutdown(Shutdown::Write)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownloadMode {
    /// Content arrives `delay_ms` after the download starts.
    Simulated { delay_ms: u64 },
    /// Each transfer starts `enqueue_overhead_ms` after it is requested.
    Service { enqueue_overhead_ms: u64 },
}

pub struct Downloader {
    source: Arc<dyn VideoSource>,
    mode: DownloadMode,
    clock: Clock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downloaded {
    pub manifest: WorkloadManifest,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug)]
pub struct PairDownload {
    pub index: u32,
    pub started_ms: u64,
    pub outer: Result<Downloaded, DownloadError>,
    pub inner: Result<Downloaded, DownloadError>,
}

impl Downloader {
    pub fn new(source: Arc<dyn VideoSource>, mode: DownloadMode, clock: Clock) -> Self {
        Downloader { source, mode, clock }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn list(&self) -> Result<Vec<ListingEntry>, DownloadError> {
        self.source.list()
    }

    pub fn download(&self, name: &str, kind: VideoKind) -> Result<Downloaded, DownloadError> {
        let start_ms = self.clock.now_ms();
        let bytes = match self.mode {
            DownloadMode::Simulated { delay_ms } => {
                let bytes = self.source.fetch(name);
                self.clock.sleep_until_ms(start_ms + delay_ms);
                bytes
            }
            DownloadMode::Service { enqueue_overhead_ms } => {
                self.clock.sleep_until_ms(start_ms + enqueue_overhead_ms);
                self.source.fetch(name)
            }
        }?;
        let manifest = WorkloadManifest::from_json(&bytes)
            .map_err(|source| DownloadError::Manifest { name: name.to_string(), source })?;
        if manifest.name != name || manifest.kind != kind {
            return Err(DownloadError::Malformed(format!(
                "requested {} video `{name}`, got {} video `{}`",
                kind.as_str(),
                manifest.kind.as_str(),
                manifest.name
            )));
        }
        Ok(Downloaded { manifest, start_ms, end_ms: self.clock.now_ms() })
    }

    /// Downloads both members of a pair concurrently.
    pub fn download_pair(&self, pair: &PairRef) -> PairDownload {
        let started_ms = self.clock.now_ms();
        let fetch = |name: &Option<String>, kind: VideoKind| match name {
            Some(name) => self.download(name, kind),
            None => Err(DownloadError::NotFound(format!("{} video of pair {}", kind.as_str(), pair.index))),
        };
        let (outer, inner) = thread::scope(|s| {
            let outer = s.spawn(|| fetch(&pair.outer, VideoKind::Outer));
            let inner = fetch(&pair.inner, VideoKind::Inner);
            (outer.join().expect("download thread panicked"), inner)
        });
        PairDownload { index: pair.index, started_ms, outer, inner }
    }
}

#[derive(Debug, Clone, Default)]
pub enum LoopMode {
    /// Polls the listing and downloads whatever is new, oldest first.
    #[default]
    Latest,
    /// Downloads the catalog's pairs in recording order.
    Test,
}

#[derive(Debug, Clone)]
pub struct LoopPlan {
    pub mode: LoopMode,
    pub inter_pair_wait_ms: u64,
    /// Stop after this many pairs.
    pub pair_limit: Option<usize>,
}

/// Runs the download loop, handing each pair to `on_pair`. Pair starts are
/// at least `inter_pair_wait_ms` apart and never overlap. Stops at the pair
/// limit, when `stop` is set, when `on_pair` returns false, or (test mode)
/// when the list is exhausted. Only a failed listing aborts the loop.
pub fn download_loop(
    downloader: &Downloader,
    plan: &LoopPlan,
    stop: &AtomicBool,
    mut on_pair: impl FnMut(PairDownload) -> bool,
) -> Result<usize, DownloadError> {
    let clock = downloader.clock();
    let limit = plan.pair_limit.unwrap_or(usize::MAX);
    let mut done = 0usize;
    let mut next_start = clock.now_ms();
    let pace = |next_start: &mut u64| {
        clock.sleep_until_ms(*next_start);
        let now = clock.now_ms();
        *next_start = now + plan.inter_pair_wait_ms;
    };

    match plan.mode {
        LoopMode::Test => {
            let pairs = group_pairs(&downloader.list()?);
            for pair in pairs.into_iter().take(limit) {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                pace(&mut next_start);
                done += 1;
                if !on_pair(downloader.download_pair(&pair)) {
                    break;
                }
            }
        }
        LoopMode::Latest => {
            let mut record = DownloadRecord::default();
            while done < limit && !stop.load(Ordering::SeqCst) {
                pace(&mut next_start);
                let fresh = new_videos(&downloader.list()?, &record);
                let Some(pair) = group_pairs(&fresh).into_iter().next() else {
                    continue;
                };
                for name in pair.outer.iter().chain(&pair.inner) {
                    record.insert(name);
                }
                done += 1;
                if !on_pair(downloader.download_pair(&pair)) {
                    break;
                }
            }
        }
    }
    Ok(done)
}
