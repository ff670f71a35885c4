//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Cursor;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use common::{analysis, catalog, Fleet};
use edgedash::analysis::{
    analyze_video, analyze_video_with, classify_inner_frame, classify_outer_frame, AnalysisConfig, VirtualTimeline,
};
use edgedash::ledger::{read_event_log, EventKind, Ledger, LedgerEvent, Role, UnitRecord};
use edgedash::metrics::{compute_metrics, read_csv_file, MetricsRow};
use edgedash::model::profiles::{FIND_X2_PRO, ONEPLUS_8, PIXEL_3, PIXEL_6};
use edgedash::model::{Command, FrameRecord, HardwareInfo, VideoKind, WorkloadManifest};
use edgedash::node::MasterReport;
use edgedash::scheduler::{schedule_pair, Assignment, DeviceState, SchedulePolicy, Target};
use edgedash::segment::{merge_results, segment_name, split_video, SegmentResult};
use edgedash::wire::{
    encode_byte_payload, file_frames, frame_stream_decode, frame_stream_encode, read_frame, BytePayload, FilePayload,
    Frame, PairingTable, Payload, ReadyFile,
};
use edgedash::workload::{generate, ContentSpec, GenSpec};

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(label: &str, started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure!(took < limit, "{label} took {took:?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------- accounting

/// Interval between two events looked up straight from the event log.
fn span(events: &[LedgerEvent], sv: &str, s: EventKind, ev: &str, e: EventKind, node: &str) -> Result<i64, String> {
    let at = |video: &str, kind: EventKind| {
        events
            .iter()
            .rev()
            .find(|x| x.video == video && x.event == kind)
            .ok_or_else(|| format!("no {kind:?} for {video}"))
    };
    let (a, b) = (at(sv, s)?, at(ev, e)?);
    ensure!(a.node == node && b.node == node, "{sv}/{ev}: {:?} on {} and {:?} on {}", s, a.node, e, b.node);
    Ok(b.t_ms as i64 - a.t_ms as i64)
}

/// Checks the written metrics against intervals recomputed from the written event log.
fn check_identity(report: &MasterReport, label: &str) -> Result<usize, String> {
    use EventKind::*;
    let dir = &report.output_dir;
    let csv = read_csv_file(&dir.join("metrics.csv")).map_err(|e| format!("{label}: {e}"))?;
    let log = std::fs::read(dir.join("events.jsonl")).map_err(|e| format!("{label}: {e}"))?;
    let events = read_event_log(&log[..]).map_err(|e| format!("{label}: {e}"))?;
    let master = report.ledger.master_node.as_str();
    ensure!(csv.len() == report.ledger.units.len(), "{label}: {} rows for {} units", csv.len(), report.ledger.units.len());
    ensure!(csv.len() == report.deliveries.len(), "{label}: {} rows for {} deliveries", csv.len(), report.deliveries.len());

    for u in &report.ledger.units {
        let row = csv.iter().find(|r| r.video == u.unit).ok_or_else(|| format!("{label}: no row for {}", u.unit))?;
        let (src, unit) = (u.source_video.as_str(), u.unit.as_str());
        let turnaround = span(&events, src, DownloadStart, unit, ResultReceivedByMaster, master)?;
        let download = span(&events, src, DownloadStart, src, DownloadEnd, master)?;
        let wait = span(&events, unit, ReceivedByProcessor, unit, ProcessingStart, &u.node)?;
        let processing = span(&events, unit, ProcessingStart, unit, ProcessingEnd, &u.node)?;
        let (transfer, ret) = match u.role {
            Role::Master => (None, None),
            Role::Worker => (
                Some(span(&events, unit, TransferStart, unit, TransferEnd, master)?),
                Some(span(&events, unit, ResultReturnStart, unit, ResultReturnEnd, master)?),
            ),
        };
        let got = (row.download_ms, row.transfer_ms, row.return_ms, row.processing_ms, row.wait_ms, row.turnaround_ms);
        ensure!(
            got == (download, transfer, ret, processing, wait, turnaround),
            "{label} {unit}: csv {got:?} vs log {:?}",
            (download, transfer, ret, processing, wait, turnaround)
        );
        let sum = row.download_ms
            + row.transfer_ms.unwrap_or(0)
            + row.return_ms.unwrap_or(0)
            + row.processing_ms
            + row.wait_ms
            + row.overhead_ms;
        ensure!(sum == turnaround, "{label} {unit}: components sum to {sum}, turnaround {turnaround}");
    }
    Ok(csv.len())
}

fn pixel3_row() -> Result<MetricsRow, String> {
    let mut l = Ledger::new("pixel-3");
    let mut t = 5_000;
    for (dt, e) in [
        (0, EventKind::DownloadStart),
        (350, EventKind::DownloadEnd),
        (0, EventKind::ReceivedByProcessor),
        (211, EventKind::ProcessingStart),
        (385, EventKind::ProcessingEnd),
        (26, EventKind::ResultReceivedByMaster),
    ] {
        t += dt;
        l.record(t, "pixel-3", "out_0000", e);
    }
    l.upsert_unit(UnitRecord {
        unit: "out_0000".into(),
        source_video: "out_0000".into(),
        kind: VideoKind::Outer,
        node: "pixel-3".into(),
        role: Role::Master,
        duration_ms: 1000,
        frames_total: 30,
        frames_skipped: 0,
    });
    compute_metrics(&l).map_err(|e| e.to_string())?.pop().ok_or_else(|| "no row".into())
}

fn accounting_identity() -> Result<(), String> {
    let row = pixel3_row()?;
    ensure!(
        (row.download_ms, row.processing_ms, row.wait_ms, row.overhead_ms, row.turnaround_ms) == (350, 385, 211, 26, 972),
        "single-node anchor row {row:?}"
    );
    ensure!(350 + 385 + 211 + 26 == row.turnaround_ms, "anchor sum");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cat = catalog(&dir.path().join("cat"), 4, 1000, 10, 11);
    let fleets = [
        ("master alone", Fleet::new("pixel-6", PIXEL_6, &cat, &dir.path().join("a")), false),
        (
            "master + 1 worker",
            Fleet::new("find-x2-pro", FIND_X2_PRO, &cat, &dir.path().join("b")).worker("pixel-3", PIXEL_3, analysis(0.0, 5.0)),
            false,
        ),
        (
            "master + 2 workers, esd 2",
            Fleet::new("pixel-3", PIXEL_3, &cat, &dir.path().join("c"))
                .worker("pixel-6", PIXEL_6, analysis(2.0, 40.0))
                .worker("oneplus-8", ONEPLUS_8, analysis(2.0, 40.0)),
            false,
        ),
        (
            "master + 2 workers, segmented",
            Fleet::new("find-x2-pro", FIND_X2_PRO, &cat, &dir.path().join("d"))
                .worker("pixel-6", PIXEL_6, analysis(0.0, 5.0))
                .worker("oneplus-8", ONEPLUS_8, analysis(0.0, 5.0)),
            true,
        ),
    ];
    for (label, mut fleet, segmented) in fleets {
        fleet.master.run.pairs = 3;
        fleet.master.run.inter_pair_wait_ms = Some(300);
        fleet.master.dashcam.simulated_download_ms = 60;
        fleet.master.run.segmentation = segmented;
        let (report, _) = fleet.run();
        let rows = check_identity(&report, label)?;
        let expected = if segmented { 9 } else { 6 };
        ensure!(rows == expected, "{label}: {rows} rows, expected {expected}");
    }
    Ok(())
}

// ---------------------------------------------------------------- early stop

fn manifest(kind: VideoKind, frames: u32, duration_ms: u64, seed: u64) -> WorkloadManifest {
    let fps = (frames as u64 * 1000 / duration_ms) as u32;
    let spec = GenSpec {
        pairs: 1,
        duration_ms,
        fps,
        width: 1280,
        height: 720,
        seed,
        output_dir: "unused".into(),
        content: ContentSpec { hazard_rate: 0.3, distraction_rate: 0.3, ..ContentSpec::default() },
    };
    let m = generate(&spec).expect("valid spec").into_iter().find(|m| m.kind == kind).expect("pair has both kinds");
    assert_eq!(m.frames.len(), frames as usize, "fixture frame count");
    m
}

/// Frames started in a loop that starts a frame only while elapsed < budget.
fn loop_oracle(frames: usize, duration_ms: u64, cost_ms: f64, esd: f64) -> usize {
    if esd == 0.0 {
        return frames;
    }
    let budget = duration_ms as f64 / esd;
    if cost_ms == 0.0 {
        return frames;
    }
    ((budget / cost_ms).ceil() as usize).min(frames)
}

fn early_stop_budget() -> Result<(), String> {
    let started = Instant::now();
    let m = manifest(VideoKind::Outer, 30, 1000, 7);
    let cfg = AnalysisConfig { esd: 2.8, frame_cost_ms: 30.0, ..AnalysisConfig::default() };
    let a = analyze_video(&m, &cfg).map_err(|e| e.to_string())?;
    let expected = loop_oracle(30, 1000, 30.0, 2.8);
    ensure!(expected == 12, "oracle gives {expected}");
    ensure!(a.stats.processed_frames == expected, "processed {} frames, expected {expected}", a.stats.processed_frames);
    ensure!(a.result.body.len() == expected, "result holds {} frames", a.result.body.len());
    ensure!((a.stats.skip_rate() - 0.6).abs() < 1e-9, "skip rate {}", a.stats.skip_rate());
    ensure!(a.stats.frame_loop_ms <= 357.0 + 30.0 + 50.0, "frame loop took {:.1} ms", a.stats.frame_loop_ms);
    within("early stop", started, Duration::from_secs(1))
}

// ---------------------------------------------------------------- monotonicity

const ESDS: [f64; 6] = [0.0, 1.0, 2.0, 2.8, 4.0, 6.0];

fn skipped_by_esd(m: &WorkloadManifest, cost: f64, wall: bool) -> Result<Vec<usize>, String> {
    ESDS.iter()
        .map(|&esd| {
            let cfg = AnalysisConfig { esd, frame_cost_ms: cost, ..AnalysisConfig::default() };
            let a = if wall {
                analyze_video(m, &cfg)
            } else {
                analyze_video_with(m, &cfg, &mut VirtualTimeline::default())
            };
            a.map(|a| a.stats.skipped_frames).map_err(|e| e.to_string())
        })
        .collect()
}

fn check_monotone(skipped: &[usize], label: &str) -> Result<(), String> {
    ensure!(skipped[0] == 0, "{label}: esd 0 skipped {}", skipped[0]);
    ensure!(skipped.windows(2).all(|w| w[0] <= w[1]), "{label}: skipped over esd {ESDS:?} = {skipped:?}");
    Ok(())
}

fn monotonicity() -> Result<(), String> {
    let m = manifest(VideoKind::Inner, 30, 1000, 3);
    let wall = skipped_by_esd(&m, 30.0, true)?;
    check_monotone(&wall, "wall clock")?;
    ensure!(wall[5] > wall[1], "no skipping at esd 6: {wall:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..40 {
        let frames = rng.gen_range(10..=120);
        let kind = if i % 2 == 0 { VideoKind::Outer } else { VideoKind::Inner };
        let m = manifest(kind, frames, frames as u64 * 100, i);
        let cost = rng.gen_range(1.0..400.0);
        let skipped = skipped_by_esd(&m, cost, false)?;
        check_monotone(&skipped, &m.name)?;
        for (esd, s) in ESDS.iter().zip(&skipped) {
            let expected = m.frames.len() - loop_oracle(m.frames.len(), m.duration_ms, cost, *esd);
            ensure!(*s == expected, "{frames} frames cost {cost} esd {esd}: skipped {s}, oracle {expected}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- merge/split

fn merge_split() -> Result<(), String> {
    let started = Instant::now();
    let cfg = AnalysisConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let frames = rng.gen_range(10..=120);
        let kind = if rng.gen_bool(0.5) { VideoKind::Outer } else { VideoKind::Inner };
        let m = manifest(kind, frames, frames as u64 * 100, 1000 + i);
        let whole = analyze_video(&m, &cfg).map_err(|e| e.to_string())?.result;
        for n in [2, 3, 5] {
            let mut parts: Vec<SegmentResult> = split_video(&m, n)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|s| {
                    let r = analyze_video(s, &cfg).expect("segment analyses");
                    SegmentResult { result: r.result, origin_frame_offset: s.origin_frame_offset }
                })
                .collect();
            parts.shuffle(&mut rng);
            let merged = merge_results(parts, &m.name, n).map_err(|e| e.to_string())?;
            ensure!(merged == whole, "{} ({frames} frames) split {n}: merged result differs", m.name);
            ensure!(merged.serialize() == whole.serialize(), "{} split {n}: serialized bytes differ", m.name);
        }
    }
    within("merge/split", started, Duration::from_secs(10))
}

// ---------------------------------------------------------------- protocol

fn streams(rng: &mut ChaCha8Rng) -> Vec<(ReadyFile, Vec<Frame>)> {
    (1..=3u64)
        .map(|id| {
            let len = [0, 1, 32 * 1024, rng.gen_range(2..200_000)][rng.gen_range(0..4)];
            let content: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let command = [Command::Analyse, Command::Segment, Command::Return][rng.gen_range(0..3)];
            let filename = format!("in_{id:04}.json");
            let bytes = encode_byte_payload(command, Some((id, &filename))).expect("valid reference");
            let mut frames = file_frames(&FilePayload { payload_id: id, content: content.clone() }, 8 * 1024);
            frames.insert(rng.gen_range(0..=frames.len()), Frame::Bytes(bytes));
            (ReadyFile { payload_id: id, filename, command, content }, frames)
        })
        .collect()
}

/// Random merge of the streams; each stream keeps its own order.
fn interleave(rng: &mut ChaCha8Rng, streams: &[Vec<Frame>]) -> Vec<Frame> {
    let mut owners: Vec<usize> = streams.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.len())).collect();
    owners.shuffle(rng);
    let mut next = vec![0usize; streams.len()];
    owners
        .into_iter()
        .map(|i| {
            next[i] += 1;
            streams[i][next[i] - 1].clone()
        })
        .collect()
}

/// (payload id, filename, command, content) of each delivered file.
type Delivered = BTreeSet<(u64, String, String, Vec<u8>)>;

fn deliver(frames: Vec<Frame>) -> Result<Delivered, String> {
    let mut table = PairingTable::new();
    let mut out = BTreeSet::new();
    for f in frames {
        if let Some(edgedash::wire::Inbound::Ready(r)) = table.on_frame(f).map_err(|e| e.to_string())? {
            out.insert((r.payload_id, r.filename, r.command.to_string(), r.content));
        }
    }
    ensure!(table.is_empty(), "pairing table not drained");
    Ok(out)
}

fn protocol_interleaving() -> Result<(), String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for round in 0..200 {
        let streams = streams(&mut rng);
        let expected: Delivered = streams
            .iter()
            .map(|(r, _)| (r.payload_id, r.filename.clone(), r.command.to_string(), r.content.clone()))
            .collect();
        let frames: Vec<Vec<Frame>> = streams.into_iter().map(|(_, f)| f).collect();
        let baseline = deliver(frames.concat())?;
        ensure!(baseline == expected, "round {round}: in-order baseline differs from sent files");
        let shuffled = deliver(interleave(&mut rng, &frames))?;
        ensure!(shuffled == baseline, "round {round}: interleaved delivery differs");
    }

    for round in 0..200 {
        let payloads: Vec<Payload> = (0..rng.gen_range(0..12u64))
            .map(|i| {
                if rng.gen_bool(0.4) {
                    Payload::Bytes(BytePayload::from_text(format!("CMD{}:x:{round}", rng.gen::<u16>())))
                } else {
                    let len = [0, 0, 1, rng.gen_range(0..70_000)][rng.gen_range(0..4)];
                    Payload::File(FilePayload { payload_id: i + 1, content: (0..len).map(|_| rng.gen()).collect() })
                }
            })
            .collect();
        let chunk = rng.gen_range(1..40_000);
        let bytes = frame_stream_encode(&payloads, chunk);
        let back = frame_stream_decode(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == payloads, "round {round}: stream round trip differs (chunk {chunk})");
        let mut cur = Cursor::new(&bytes);
        let mut frames = 0;
        while let Some(f) = read_frame(&mut cur).map_err(|e| e.to_string())? {
            ensure!(f.encode().len() <= bytes.len(), "frame larger than stream");
            frames += 1;
        }
        let expected: usize = payloads
            .iter()
            .map(|p| match p {
                Payload::Bytes(_) => 1,
                Payload::File(f) => f.content.len().div_ceil(chunk) + 1,
            })
            .sum();
        ensure!(frames == expected, "round {round}: read {frames} frames, expected {expected}");
    }
    within("protocol", started, Duration::from_secs(10))
}

// ---------------------------------------------------------------- scheduler

type Rank = (u64, u64, u64, u8, std::cmp::Reverse<String>);

fn rank(d: &DeviceState) -> Rank {
    let hw = &d.hw;
    (
        hw.cpu_freq_mhz as u64 * hw.cpu_cores as u64,
        hw.total_ram_mb,
        hw.avail_ram_mb,
        hw.battery_pct,
        std::cmp::Reverse(d.name.clone()),
    )
}

fn best<'a>(candidates: impl IntoIterator<Item = &'a DeviceState>) -> Option<&'a DeviceState> {
    let mut top: Option<&DeviceState> = None;
    for c in candidates {
        if top.is_none_or(|t| rank(c) > rank(t)) {
            top = Some(c);
        }
    }
    top
}

/// Rule-by-rule restatement of the assignment rules for one no-segmentation video.
fn oracle_pick(master: &DeviceState, workers: &[DeviceState], outer: Option<&DeviceState>) -> Target {
    let eligible = |d: &DeviceState| outer.is_none_or(|o| d.target != o.target && rank(d) <= rank(o));
    let master_on_top = workers.iter().all(|w| rank(master) > rank(w));
    if master_on_top && eligible(master) && !master.busy {
        return Target::Local;
    }
    let idle: Vec<&DeviceState> = workers.iter().filter(|w| eligible(w) && !w.busy).collect();
    if let Some(w) = best(idle) {
        return w.target.clone();
    }
    if eligible(master) && !master.busy {
        return Target::Local;
    }
    let open: Vec<&DeviceState> = workers.iter().filter(|w| eligible(w)).collect();
    if let Some(q) = open.iter().map(|w| w.queue_len).min() {
        return best(open.into_iter().filter(|w| w.queue_len == q)).map(|w| w.target.clone()).expect("non-empty");
    }
    if eligible(master) {
        return Target::Local;
    }
    outer.map(|o| o.target.clone()).unwrap_or(Target::Local)
}

fn oracle(master: &DeviceState, workers: &[DeviceState], policy: SchedulePolicy) -> Vec<(String, Target)> {
    let pair = |o: Target, i: Target| vec![("o".to_string(), o), ("i".to_string(), i)];
    match workers.len() {
        0 => pair(Target::Local, Target::Local),
        1 if rank(master) > rank(&workers[0]) => pair(Target::Local, workers[0].target.clone()),
        1 => pair(workers[0].target.clone(), Target::Local),
        _ if policy.segmentation => {
            let mut all: Vec<&DeviceState> = std::iter::once(master).chain(workers).collect();
            all.sort_by_key(|d| std::cmp::Reverse(rank(d)));
            let rest = &all[1..];
            let mut out = vec![("o".to_string(), all[0].target.clone())];
            for i in 0..policy.segment_count {
                out.push((segment_name("i", i), rest[i % rest.len()].target.clone()));
            }
            out
        }
        _ => {
            let o = oracle_pick(master, workers, None);
            let (mut m, mut ws) = (master.clone(), workers.to_vec());
            let holder = if o == Target::Local { &mut m } else { ws.iter_mut().find(|w| w.target == o).expect("in fleet") };
            holder.busy = true;
            holder.queue_len += 1;
            let holder = holder.clone();
            let i = oracle_pick(&m, &ws, Some(&holder));
            pair(o, i)
        }
    }
}

fn summary(a: &[Assignment]) -> Vec<(String, Target)> {
    a.iter().map(|x| (x.video_name.clone(), x.target.clone())).collect()
}

fn dev(target: Target, name: &str, hw: HardwareInfo) -> DeviceState {
    DeviceState::new(target, name, hw)
}

fn ep(id: &str) -> Target {
    Target::Remote(id.to_string())
}

fn scheduler_conformance() -> Result<(), String> {
    let off = SchedulePolicy::default();
    let seg = SchedulePolicy { segmentation: true, segment_count: 2 };
    let find = dev(Target::Local, "find-x2-pro", FIND_X2_PRO);
    let p6 = dev(ep("ep-1"), "pixel-6", PIXEL_6);
    let op8 = dev(ep("ep-2"), "oneplus-8", ONEPLUS_8);
    let p3 = dev(Target::Local, "pixel-3", PIXEL_3);
    let s = |o: Target, i: Target| vec![("o".to_string(), o), ("i".to_string(), i)];
    type Fixture<'a> = (&'a str, DeviceState, Vec<DeviceState>, SchedulePolicy, Vec<(String, Target)>);
    let fixtures: Vec<Fixture> = vec![
        ("master only", find.clone(), vec![], off, s(Target::Local, Target::Local)),
        ("one weaker worker", find.clone(), vec![p6.clone()], off, s(Target::Local, ep("ep-1"))),
        ("one stronger worker", p3.clone(), vec![p6.clone()], off, s(ep("ep-1"), Target::Local)),
        ("two workers", find.clone(), vec![p6.clone(), op8.clone()], off, s(Target::Local, ep("ep-2"))),
        (
            "two workers, segmented",
            find.clone(),
            vec![p6.clone(), op8.clone()],
            seg,
            vec![("o".into(), Target::Local), ("i_0".into(), ep("ep-2")), ("i_1".into(), ep("ep-1"))],
        ),
    ];
    for (label, m, ws, policy, expected) in fixtures {
        let got = schedule_pair(&m, &ws, "o", "i", policy);
        ensure!(summary(&got) == expected, "{label}: got {:?}, expected {expected:?}", summary(&got));
        if policy.segmentation {
            ensure!(got[1..].iter().all(|a| a.command == Command::Segment && a.segment_count == 2), "{label}: commands");
        } else {
            ensure!(got.iter().all(|a| a.command == Command::Analyse), "{label}: commands");
        }
    }

    let profiles = [PIXEL_3, PIXEL_6, ONEPLUS_8, FIND_X2_PRO];
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let random_device = |rng: &mut ChaCha8Rng, target: Target, name: String| {
        let mut hw = profiles[rng.gen_range(0..4)];
        if rng.gen_bool(0.3) {
            hw.battery_pct = rng.gen_range(10..=100);
            hw.avail_ram_mb = rng.gen_range(0..=hw.total_ram_mb);
        }
        let mut d = DeviceState::new(target, name, hw);
        d.busy = rng.gen_bool(0.5);
        d.queue_len = if d.busy { rng.gen_range(1..5) } else { 0 };
        d
    };
    let mut branches: HashMap<&str, usize> = HashMap::new();
    for round in 0..1000 {
        // node names are unique within a fleet
        let mut names: Vec<String> = (0..9).map(|i| format!("n{i}")).collect();
        names.shuffle(&mut rng);
        let master = random_device(&mut rng, Target::Local, names.pop().expect("nine names"));
        let workers: Vec<DeviceState> = (0..rng.gen_range(0..6))
            .map(|i| {
                let name = names.pop().expect("nine names");
                random_device(&mut rng, ep(&format!("ep-{i}")), name)
            })
            .collect();
        let policy = SchedulePolicy { segmentation: rng.gen_bool(0.4), segment_count: rng.gen_range(1..5) };
        let got = schedule_pair(&master, &workers, "o", "i", policy);
        let want = oracle(&master, &workers, policy);
        ensure!(summary(&got) == want, "round {round}: got {:?}, oracle {want:?}", summary(&got));

        let cap = |t: &Target| {
            let d = if *t == Target::Local { &master } else { workers.iter().find(|w| &w.target == t).expect("in fleet") };
            d.hw.capacity_score()
        };
        let outer = cap(&got[0].target);
        ensure!(got[1..].iter().all(|a| cap(&a.target) <= outer), "round {round}: outer priority violated");
        let branch = match (workers.len(), policy.segmentation) {
            (0, _) => "master only",
            (1, _) => "one worker",
            (_, true) => "segmented",
            _ => "multi worker",
        };
        *branches.entry(branch).or_default() += 1;
    }
    ensure!(branches.len() == 4 && branches.values().all(|&n| n >= 50), "branch coverage {branches:?}");
    Ok(())
}

// ---------------------------------------------------------------- end to end

fn end_to_end() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cat = catalog(&dir.path().join("cat"), 20, 1000, 30, 2024);
    let mut fleet = Fleet::new("find-x2-pro", FIND_X2_PRO, &cat, &dir.path().join("out"))
        .worker("pixel-6", PIXEL_6, analysis(0.0, 5.0))
        .worker("oneplus-8", ONEPLUS_8, analysis(0.0, 5.0));
    fleet.master.run.pairs = 20;
    fleet.master.run.segmentation = true;
    fleet.master.dashcam.simulated_download_ms = 350;
    let (report, workers) = fleet.run();

    ensure!(report.pairs_downloaded == 20 && report.failed_downloads.is_empty(), "downloads {:?}", report.failed_downloads);
    let outer = report.results.keys().filter(|k| k.starts_with("out_")).count();
    let inner: Vec<_> = report.results.iter().filter(|(k, _)| k.starts_with("in_")).collect();
    ensure!(outer == 20 && inner.len() == 20, "{outer} outer and {} inner results", inner.len());
    for (name, r) in &inner {
        ensure!(r.body.frame_indices() == (0..30).collect::<Vec<u32>>(), "{name}: merged frames {:?}", r.body.frame_indices());
    }
    let on_disk = std::fs::read_dir(dir.path().join("out/results")).map_err(|e| e.to_string())?.count();
    ensure!(on_disk == 40, "{on_disk} result files on disk");

    let slow: Vec<_> = report.rows.iter().filter(|r| r.turnaround_ms >= 1000).map(|r| (&r.video, r.turnaround_ms)).collect();
    ensure!(slow.is_empty(), "turnaround >= 1000 ms: {slow:?}");
    ensure!(report.aggregate.near_real_time_fraction == Some(1.0), "near real time {:?}", report.aggregate.near_real_time_fraction);
    let outer_nodes: BTreeSet<_> =
        report.deliveries.iter().filter(|(u, _)| u.starts_with("out_")).map(|(_, n)| n.as_str()).collect();
    ensure!(outer_nodes == BTreeSet::from(["find-x2-pro"]), "outer videos ran on {outer_nodes:?}");
    let per_worker: BTreeMap<_, _> = workers.iter().map(|w| (w.endpoint_id.clone(), w.processed)).collect();
    ensure!(per_worker.values().all(|&n| n == 20), "segments per worker {per_worker:?}");
    check_identity(&report, "end to end")?;
    Ok(())
}

// ---------------------------------------------------------------- classifier

#[derive(Deserialize)]
struct Golden {
    width: u32,
    height: u32,
    cases: Vec<GoldenCase>,
}

#[derive(Deserialize)]
struct GoldenCase {
    name: String,
    kind: VideoKind,
    frame: FrameRecord,
    #[serde(default)]
    danger: Vec<bool>,
    #[serde(default)]
    distracted: Option<bool>,
}

fn classifier_rules() -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/classifier.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let golden: Golden = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(golden.cases.len() == 12, "{} golden cases", golden.cases.len());
    let cfg = AnalysisConfig::default();
    let (w, h) = (golden.width, golden.height);
    for c in &golden.cases {
        match c.kind {
            VideoKind::Outer => {
                let got: Vec<bool> = classify_outer_frame(&c.frame, &cfg, w, h).detections.iter().map(|d| d.danger).collect();
                ensure!(got == c.danger, "{}: danger {got:?}, expected {:?}", c.name, c.danger);
            }
            VideoKind::Inner => {
                let got = classify_inner_frame(&c.frame, &cfg, w, h).distracted;
                ensure!(Some(got) == c.distracted, "{}: distracted {got}, expected {:?}", c.name, c.distracted);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("accounting identity", accounting_identity),
        ("early-stop budget", early_stop_budget),
        ("early-stop monotonicity", monotonicity),
        ("merge-split oracle", merge_split),
        ("protocol interleaving", protocol_interleaving),
        ("scheduler conformance", scheduler_conformance),
        ("end-to-end near real time", end_to_end),
        ("classifier rules", classifier_rules),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS {name} ({took:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.2}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
