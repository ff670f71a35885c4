//! Turnaround accounting.
//!
//! Per processed unit: download, transfer, return, processing and wait come
//! from their event pairs; turnaround runs from the download start to the
//! master receiving the result; overhead is whatever remains, so the six
//! components always sum to the turnaround. Every interval is taken between
//! two events of the same node.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::ledger::{EventKind, Ledger, Role};
use crate::model::VideoKind;

pub const CSV_HEADER: [&str; 13] = [
    "video",
    "node",
    "role",
    "kind",
    "download_ms",
    "transfer_ms",
    "return_ms",
    "processing_ms",
    "wait_ms",
    "overhead_ms",
    "turnaround_ms",
    "frames_total",
    "frames_skipped",
];

const NOT_APPLICABLE: &str = "n/a";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("video `{video}` is missing event `{event}`")]
    MissingEvent { video: String, event: EventKind },
    #[error("video `{video}`: `{start}` and `{end}` were recorded on different nodes ({start_node} vs {end_node})")]
    CrossNode {
        video: String,
        start: EventKind,
        end: EventKind,
        start_node: String,
        end_node: String,
    },
    #[error("video `{video}`: `{end}` precedes `{start}`")]
    Order { video: String, start: EventKind, end: EventKind },
    #[error("metrics CSV line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("metrics CSV has no rows")]
    Empty,
    #[error("metrics i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub video: String,
    pub node: String,
    pub role: Role,
    pub kind: VideoKind,
    pub download_ms: i64,
    /// `None` for locally processed units.
    pub transfer_ms: Option<i64>,
    pub return_ms: Option<i64>,
    pub processing_ms: i64,
    pub wait_ms: i64,
    pub overhead_ms: i64,
    pub turnaround_ms: i64,
    pub frames_total: usize,
    pub frames_skipped: usize,
    /// Source video length; unknown for rows read back from CSV.
    pub duration_ms: Option<u64>,
}

impl MetricsRow {
    pub fn component_sum(&self) -> i64 {
        self.download_ms
            + self.transfer_ms.unwrap_or(0)
            + self.return_ms.unwrap_or(0)
            + self.processing_ms
            + self.wait_ms
            + self.overhead_ms
    }

    pub fn near_real_time(&self, fallback_duration_ms: Option<u64>) -> Option<bool> {
        self.duration_ms
            .or(fallback_duration_ms)
            .map(|d| self.turnaround_ms < d as i64)
    }
}

fn interval(
    ledger: &Ledger,
    start_video: &str,
    start: EventKind,
    end_video: &str,
    end: EventKind,
    node: Option<&str>,
) -> Result<i64, MetricsError> {
    let missing = |video: &str, event| MetricsError::MissingEvent { video: video.to_string(), event };
    let s = ledger.find(start_video, start).ok_or_else(|| missing(start_video, start))?;
    let e = ledger.find(end_video, end).ok_or_else(|| missing(end_video, end))?;
    let expected = node.unwrap_or(&s.node);
    if s.node != e.node || s.node != expected {
        return Err(MetricsError::CrossNode {
            video: end_video.to_string(),
            start,
            end,
            start_node: s.node.clone(),
            end_node: e.node.clone(),
        });
    }
    if e.t_ms < s.t_ms {
        return Err(MetricsError::Order { video: end_video.to_string(), start, end });
    }
    Ok(e.t_ms as i64 - s.t_ms as i64)
}

/// One row per processed unit, in ledger unit order.
pub fn compute_metrics(ledger: &Ledger) -> Result<Vec<MetricsRow>, MetricsError> {
    use EventKind::*;
    let master = ledger.master_node.as_str();
    ledger
        .units
        .iter()
        .map(|u| {
            let src = u.source_video.as_str();
            let unit = u.unit.as_str();
            let download_ms = interval(ledger, src, DownloadStart, src, DownloadEnd, Some(master))?;
            let turnaround_ms = interval(ledger, src, DownloadStart, unit, ResultReceivedByMaster, Some(master))?;
            let (transfer_ms, return_ms) = match u.role {
                Role::Master => (None, None),
                Role::Worker => (
                    Some(interval(ledger, unit, TransferStart, unit, TransferEnd, Some(master))?),
                    Some(interval(ledger, unit, ResultReturnStart, unit, ResultReturnEnd, Some(master))?),
                ),
            };
            let wait_ms = interval(ledger, unit, ReceivedByProcessor, unit, ProcessingStart, Some(&u.node))?;
            let processing_ms = interval(ledger, unit, ProcessingStart, unit, ProcessingEnd, Some(&u.node))?;
            let counted = download_ms + transfer_ms.unwrap_or(0) + return_ms.unwrap_or(0) + processing_ms + wait_ms;
            Ok(MetricsRow {
                video: u.unit.clone(),
                node: u.node.clone(),
                role: u.role,
                kind: u.kind,
                download_ms,
                transfer_ms,
                return_ms,
                processing_ms,
                wait_ms,
                overhead_ms: turnaround_ms - counted,
                turnaround_ms,
                frames_total: u.frames_total,
                frames_skipped: u.frames_skipped,
                duration_ms: Some(u.duration_ms),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub role: Role,
    pub videos: usize,
    pub download_ms: f64,
    pub transfer_ms: Option<f64>,
    pub return_ms: Option<f64>,
    pub processing_ms: f64,
    pub wait_ms: f64,
    pub overhead_ms: f64,
    pub turnaround_ms: f64,
    pub skip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub per_node: BTreeMap<String, NodeSummary>,
    pub skip_rate: f64,
    pub avg_turnaround_ms: f64,
    pub near_real_time_fraction: Option<f64>,
}

fn avg(values: impl Iterator<Item = i64>) -> Option<f64> {
    let (sum, n) = values.fold((0i64, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

fn skip_rate<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> f64 {
    let (skipped, total) = rows.fold((0usize, 0usize), |(s, t), r| (s + r.frames_skipped, t + r.frames_total));
    if total == 0 {
        0.0
    } else {
        skipped as f64 / total as f64
    }
}

/// Per-node averages plus run totals. Rows without a known duration use
/// `fallback_duration_ms` for the near-real-time check.
pub fn aggregate(rows: &[MetricsRow], fallback_duration_ms: Option<u64>) -> Aggregate {
    let mut by_node: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_node.entry(&r.node).or_default().push(r);
    }
    let per_node = by_node
        .into_iter()
        .map(|(node, rs)| {
            let mean = |f: fn(&MetricsRow) -> i64| avg(rs.iter().map(|r| f(r))).unwrap_or(0.0);
            let summary = NodeSummary {
                role: rs[0].role,
                videos: rs.len(),
                download_ms: mean(|r| r.download_ms),
                transfer_ms: avg(rs.iter().filter_map(|r| r.transfer_ms)),
                return_ms: avg(rs.iter().filter_map(|r| r.return_ms)),
                processing_ms: mean(|r| r.processing_ms),
                wait_ms: mean(|r| r.wait_ms),
                overhead_ms: mean(|r| r.overhead_ms),
                turnaround_ms: mean(|r| r.turnaround_ms),
                skip_rate: skip_rate(rs.iter().copied()),
            };
            (node.to_string(), summary)
        })
        .collect();
    let verdicts: Vec<bool> = rows.iter().filter_map(|r| r.near_real_time(fallback_duration_ms)).collect();
    Aggregate {
        per_node,
        skip_rate: skip_rate(rows.iter()),
        avg_turnaround_ms: avg(rows.iter().map(|r| r.turnaround_ms)).unwrap_or(0.0),
        near_real_time_fraction: (verdicts.len() == rows.len() && !rows.is_empty())
            .then(|| verdicts.iter().filter(|v| **v).count() as f64 / verdicts.len() as f64),
    }
}

fn opt(v: Option<i64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |v| v.to_string())
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| MetricsError::Io(e.into());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.video.clone(),
            r.node.clone(),
            r.role.as_str().to_string(),
            r.kind.as_str().to_string(),
            r.download_ms.to_string(),
            opt(r.transfer_ms),
            opt(r.return_ms),
            r.processing_ms.to_string(),
            r.wait_ms.to_string(),
            r.overhead_ms.to_string(),
            r.turnaround_ms.to_string(),
            r.frames_total.to_string(),
            r.frames_skipped.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header_err = |reason: String| MetricsError::Parse { line: 1, reason };
    let headers = rdr.headers().map_err(|e| header_err(e.to_string()))?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(header_err(format!("unexpected header `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MetricsError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |field: &str, value: &str| MetricsError::Parse {
            line,
            reason: format!("invalid {field} `{value}`"),
        };
        let get = |i: usize| record.get(i).unwrap_or("");
        let int = |i: usize| get(i).parse::<i64>().map_err(|_| bad(CSV_HEADER[i], get(i)));
        let opt_int = |i: usize| match get(i) {
            NOT_APPLICABLE => Ok(None),
            s => s.parse::<i64>().map(Some).map_err(|_| bad(CSV_HEADER[i], s)),
        };
        let count = |i: usize| get(i).parse::<usize>().map_err(|_| bad(CSV_HEADER[i], get(i)));
        rows.push(MetricsRow {
            video: get(0).to_string(),
            node: get(1).to_string(),
            role: get(2).parse().map_err(|_| bad("role", get(2)))?,
            kind: get(3).parse().map_err(|_| bad("kind", get(3)))?,
            download_ms: int(4)?,
            transfer_ms: opt_int(5)?,
            return_ms: opt_int(6)?,
            processing_ms: int(7)?,
            wait_ms: int(8)?,
            overhead_ms: int(9)?,
            turnaround_ms: int(10)?,
            frames_total: count(11)?,
            frames_skipped: count(12)?,
            duration_ms: None,
        });
    }
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(rows)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    read_csv(std::fs::File::open(path)?)
}

/// Human-readable per-node table.
pub fn render_table(agg: &Aggregate) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| NOT_APPLICABLE.to_string(), |v| format!("{v:.0}"));
    let mut out = format!(
        "{:<16} {:<7} {:>6} {:>9} {:>9} {:>7} {:>11} {:>6} {:>9} {:>11} {:>7}\n",
        "node", "role", "videos", "download", "transfer", "return", "processing", "wait", "overhead", "turnaround", "skip"
    );
    for (node, s) in &agg.per_node {
        out.push_str(&format!(
            "{:<16} {:<7} {:>6} {:>9.0} {:>9} {:>7} {:>11.0} {:>6.0} {:>9.0} {:>11.0} {:>6.1}%\n",
            node,
            s.role.as_str(),
            s.videos,
            s.download_ms,
            na(s.transfer_ms),
            na(s.return_ms),
            s.processing_ms,
            s.wait_ms,
            s.overhead_ms,
            s.turnaround_ms,
            s.skip_rate * 100.0
        ));
    }
    out.push_str(&format!(
        "average turnaround {:.0} ms, skip rate {:.1}%",
        agg.avg_turnaround_ms,
        agg.skip_rate * 100.0
    ));
    if let Some(f) = agg.near_real_time_fraction {
        out.push_str(&format!(", near real-time {:.1}%", f * 100.0));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::UnitRecord;

    /// Ledger for one local video with the given component times and a gap
    /// of `overhead` ms between processing end and result receipt.
    fn local_ledger(download: u64, processing: u64, wait: u64, overhead: u64) -> Ledger {
        let mut l = Ledger::new("m");
        let mut t = 1000;
        let mut at = |l: &mut Ledger, dt: u64, e| {
            t += dt;
            l.record(t, "m", "out_0000", e);
        };
        at(&mut l, 0, EventKind::DownloadStart);
        at(&mut l, download, EventKind::DownloadEnd);
        at(&mut l, 0, EventKind::ReceivedByProcessor);
        at(&mut l, wait, EventKind::ProcessingStart);
        at(&mut l, processing, EventKind::ProcessingEnd);
        at(&mut l, overhead, EventKind::ResultReceivedByMaster);
        l.upsert_unit(UnitRecord {
            unit: "out_0000".into(),
            source_video: "out_0000".into(),
            kind: VideoKind::Outer,
            node: "m".into(),
            role: Role::Master,
            duration_ms: 1000,
            frames_total: 30,
            frames_skipped: 0,
        });
        l
    }

    #[test]
    fn one_node_rows_sum_to_turnaround() {
        for (d, p, w, o, turnaround) in [(350, 385, 211, 26, 972), (350, 287, 1, 24, 662), (893, 766, 259, 34, 1952)] {
            let rows = compute_metrics(&local_ledger(d, p, w, o)).unwrap();
            let r = &rows[0];
            assert_eq!(r.turnaround_ms, turnaround);
            assert_eq!(r.overhead_ms, o as i64);
            assert_eq!(r.component_sum(), r.turnaround_ms);
            assert_eq!(r.transfer_ms, None);
        }
    }

    #[test]
    fn missing_event_is_named() {
        let mut l = local_ledger(350, 100, 0, 5);
        l.events.retain(|e| e.event != EventKind::ProcessingEnd);
        let err = compute_metrics(&l).unwrap_err();
        assert!(matches!(err, MetricsError::MissingEvent { event: EventKind::ProcessingEnd, .. }), "{err}");
    }

    #[test]
    fn cross_node_interval_rejected() {
        let mut l = local_ledger(350, 100, 0, 5);
        l.events.iter_mut().find(|e| e.event == EventKind::ProcessingEnd).unwrap().node = "w".into();
        assert!(matches!(compute_metrics(&l), Err(MetricsError::CrossNode { .. })));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let rows = compute_metrics(&local_ledger(350, 385, 211, 26)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("video,node,role,kind,download_ms,transfer_ms,return_ms,processing_ms,wait_ms,overhead_ms,turnaround_ms,frames_total,frames_skipped\n"));
        assert!(text.contains(",n/a,n/a,"));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back[0], MetricsRow { duration_ms: None, ..rows[0].clone() });

        let header_only = format!("{}\n", CSV_HEADER.join(","));
        assert!(matches!(read_csv(header_only.as_bytes()), Err(MetricsError::Empty)));

        let bad = format!("{header_only}{}", text.lines().nth(1).unwrap().replace("385", "x"));
        match read_csv(bad.as_bytes()) {
            Err(MetricsError::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("processing_ms"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregates() {
        let mut rows = Vec::new();
        for (d, p, w, o) in [(350, 385, 211, 26), (350, 389, 208, 27)] {
            rows.extend(compute_metrics(&local_ledger(d, p, w, o)).unwrap());
        }
        rows[1].node = "other".into();
        rows[1].frames_skipped = 15;
        let agg = aggregate(&rows, None);
        assert_eq!(agg.per_node["m"].turnaround_ms, 972.0);
        assert_eq!(agg.per_node["other"].turnaround_ms, 974.0);
        assert_eq!(agg.avg_turnaround_ms, 973.0);
        assert!((agg.skip_rate - 0.25).abs() < 1e-12);
        assert_eq!(agg.near_real_time_fraction, Some(1.0));
        assert!(render_table(&agg).contains("other"));
    }
}
