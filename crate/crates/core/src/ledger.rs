//! Timestamped per-video event record.
//!
//! Every event is stamped with the recording node's own monotonic clock.
//! The structured log is one JSON object per line: `{t_ms, node, video, event}`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::VideoKind;

/// Milliseconds since a node-local origin.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Clock { origin: Instant::now() }
    }

    pub fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    /// Sleeps until `now_ms() >= t_ms`.
    pub fn sleep_until_ms(&self, t_ms: u64) {
        let deadline = self.origin + Duration::from_millis(t_ms);
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DownloadStart,
    DownloadEnd,
    TransferStart,
    TransferEnd,
    ResultReturnStart,
    ResultReturnEnd,
    ReceivedByProcessor,
    ProcessingStart,
    ProcessingEnd,
    ResultReceivedByMaster,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DownloadStart => "download_start",
            EventKind::DownloadEnd => "download_end",
            EventKind::TransferStart => "transfer_start",
            EventKind::TransferEnd => "transfer_end",
            EventKind::ResultReturnStart => "result_return_start",
            EventKind::ResultReturnEnd => "result_return_end",
            EventKind::ReceivedByProcessor => "received_by_processor",
            EventKind::ProcessingStart => "processing_start",
            EventKind::ProcessingEnd => "processing_end",
            EventKind::ResultReceivedByMaster => "result_received_by_master",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub t_ms: u64,
    pub node: String,
    pub video: String,
    pub event: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Worker,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Master => "master",
            Role::Worker => "worker",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master" => Ok(Role::Master),
            "worker" => Ok(Role::Worker),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// One processed unit: a whole video, or one segment of an inner video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitRecord {
    pub unit: String,
    /// Downloaded video the unit came from (equal to `unit` when unsegmented).
    pub source_video: String,
    pub kind: VideoKind,
    /// Node that analysed the unit.
    pub node: String,
    pub role: Role,
    /// Length of the source video; the near-real-time bound.
    pub duration_ms: u64,
    pub frames_total: usize,
    pub frames_skipped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub master_node: String,
    pub events: Vec<LedgerEvent>,
    pub units: Vec<UnitRecord>,
}

impl Ledger {
    pub fn new(master_node: impl Into<String>) -> Self {
        Ledger { master_node: master_node.into(), ..Default::default() }
    }

    pub fn record(&mut self, t_ms: u64, node: &str, video: &str, event: EventKind) {
        self.events.push(LedgerEvent { t_ms, node: node.to_string(), video: video.to_string(), event });
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = LedgerEvent>) {
        self.events.extend(events);
    }

    pub fn upsert_unit(&mut self, unit: UnitRecord) {
        self.units.retain(|u| u.unit != unit.unit);
        self.units.push(unit);
    }

    /// Drops everything recorded for `unit` after its download, for reassignment.
    pub fn reset_unit(&mut self, unit: &str) {
        self.events.retain(|e| {
            e.video != unit || matches!(e.event, EventKind::DownloadStart | EventKind::DownloadEnd)
        });
        self.units.retain(|u| u.unit != unit);
    }

    /// Latest occurrence of `event` for `video`.
    pub fn find(&self, video: &str, event: EventKind) -> Option<&LedgerEvent> {
        self.events.iter().rev().find(|e| e.video == video && e.event == event)
    }

    pub fn events_for<'a>(&'a self, video: &'a str) -> impl Iterator<Item = &'a LedgerEvent> + 'a {
        self.events.iter().filter(move |e| e.video == video)
    }
}

pub fn write_event_log<W: Write>(mut out: W, events: &[LedgerEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn encode_event_log(events: &[LedgerEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    write_event_log(&mut out, events).expect("writing to a Vec cannot fail");
    out
}

pub fn read_event_log<R: BufRead>(input: R) -> io::Result<Vec<LedgerEvent>> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|err| io::Error::new(io::ErrorKind::InvalidData, format!("event log line {}: {err}", n + 1)))?;
        events.push(e);
    }
    Ok(events)
}
