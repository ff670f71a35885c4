//! Frame classification, simulated model cost and early stopping.
//!
//! Outer frames flag non-vehicle objects whose centre lies in the road region
//! and vehicles large enough to indicate tailgating. Inner frames flag the
//! driver as distracted when a wrist is raised into the top of the frame or
//! the eyes sit below the ears (looking down).
//!
//! With an early-stop divisor `esd > 0` the frame loop gets a budget of
//! `duration_ms / esd`; no frame is started once the budget is spent and the
//! rest of the video is discarded.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FrameRecord, VideoKind, WorkloadManifest};
use crate::result::{
    FlaggedDetection, InnerFrameResult, KeypointEntry, OuterFrameResult, ResultBody, ResultFile,
};

/// Fractional rectangle of the frame, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64, width: u32, height: u32) -> bool {
        let (w, h) = (width as f64, height as f64);
        x >= self.x_min * w && x <= self.x_max * w && y >= self.y_min * h && y <= self.y_max * h
    }
}

impl Default for Region {
    /// Lower-middle of the frame.
    fn default() -> Self {
        Region { x_min: 0.25, x_max: 0.75, y_min: 0.667, y_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Early-stop divisor; 0 disables early stopping.
    pub esd: f64,
    /// Simulated model latency per frame.
    pub frame_cost_ms: f64,
    pub road_region: Region,
    pub tailgate_area_fraction: f64,
    pub keypoint_min_score: f64,
    /// Wrists above this fraction of the height (from the top) count as raised.
    pub hand_height_fraction: f64,
    pub vehicle_categories: BTreeSet<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            esd: 0.0,
            frame_cost_ms: 0.0,
            road_region: Region::default(),
            tailgate_area_fraction: 0.10,
            keypoint_min_score: 0.3,
            hand_height_fraction: 0.25,
            vehicle_categories: ["car", "truck", "bus", "motorcycle"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid analysis config: {0}")]
    Config(String),
    #[error("video `{name}` is {found} but the analyser expected {expected}")]
    KindMismatch { name: String, expected: VideoKind, found: VideoKind },
    #[error(transparent)]
    Manifest(#[from] crate::model::ManifestError),
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::Config(m.to_string()));
        if !(self.esd >= 0.0 && self.esd.is_finite()) {
            return bad("esd must be a finite value >= 0");
        }
        if !(self.frame_cost_ms >= 0.0 && self.frame_cost_ms.is_finite()) {
            return bad("frame_cost_ms must be a finite value >= 0");
        }
        let r = &self.road_region;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![r.x_min, r.x_max, r.y_min, r.y_max].into_iter().all(unit) || r.x_min > r.x_max || r.y_min > r.y_max {
            return bad("road_region must be an ordered rectangle inside [0, 1]");
        }
        if !(self.tailgate_area_fraction > 0.0 && self.tailgate_area_fraction <= 1.0) {
            return bad("tailgate_area_fraction must be in (0, 1]");
        }
        if !unit(self.keypoint_min_score) {
            return bad("keypoint_min_score must be in [0, 1]");
        }
        if !self.hand_height_fraction.is_finite() {
            return bad("hand_height_fraction must be finite");
        }
        Ok(())
    }

    /// Frame-loop budget, `None` when early stopping is off.
    pub fn budget_ms(&self, duration_ms: u64) -> Option<f64> {
        (self.esd > 0.0).then(|| duration_ms as f64 / self.esd)
    }
}

pub fn classify_outer_frame(frame: &FrameRecord, cfg: &AnalysisConfig, width: u32, height: u32) -> OuterFrameResult {
    let frame_area = width as f64 * height as f64;
    let detections = frame
        .detections
        .iter()
        .map(|d| {
            let clamped = d.bbox.clamped(width, height);
            let danger = if cfg.vehicle_categories.contains(&d.category) {
                clamped.area() as f64 >= cfg.tailgate_area_fraction * frame_area
            } else {
                let (cx, cy) = clamped.center();
                cfg.road_region.contains(cx, cy, width, height)
            };
            FlaggedDetection { category: d.category.clone(), danger, score: d.score, bbox: d.bbox }
        })
        .collect();
    OuterFrameResult { frame: frame.index, detections }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn classify_inner_frame(frame: &FrameRecord, cfg: &AnalysisConfig, _width: u32, height: u32) -> InnerFrameResult {
    let confident = || frame.keypoints.iter().filter(|k| k.score >= cfg.keypoint_min_score);
    let hand_line = cfg.hand_height_fraction * height as f64;
    let hand_raised = confident().any(|k| k.part.is_wrist() && (k.y as f64) < hand_line);
    let eyes = mean(confident().filter(|k| k.part.is_eye()).map(|k| k.y as f64));
    let ears = mean(confident().filter(|k| k.part.is_ear()).map(|k| k.y as f64));
    let looking_down = matches!((eyes, ears), (Some(eye), Some(ear)) if eye > ear);
    InnerFrameResult {
        frame: frame.index,
        distracted: hand_raised || looking_down,
        keypoints: frame
            .keypoints
            .iter()
            .map(|k| KeypointEntry { part: k.part, score: k.score, x: k.x, y: k.y })
            .collect(),
    }
}

/// Time source for the frame loop.
pub trait Timeline {
    fn elapsed_ms(&self) -> f64;
    /// Account for `ms` of simulated model work.
    fn spend(&mut self, ms: f64);
}

/// Real time; simulated work sleeps until its cumulative deadline so per-frame
/// jitter does not accumulate.
#[derive(Debug)]
pub struct WallTimeline {
    start: Instant,
    committed: Duration,
}

impl WallTimeline {
    pub fn start() -> Self {
        WallTimeline { start: Instant::now(), committed: Duration::ZERO }
    }
}

impl Timeline for WallTimeline {
    fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn spend(&mut self, ms: f64) {
        if ms <= 0.0 {
            return;
        }
        self.committed += Duration::from_secs_f64(ms / 1000.0);
        let now = self.start.elapsed();
        if self.committed > now {
            std::thread::sleep(self.committed - now);
        }
    }
}

/// Deterministic clock advanced only by simulated work.
#[derive(Debug, Default, Clone)]
pub struct VirtualTimeline {
    now_ms: f64,
}

impl Timeline for VirtualTimeline {
    fn elapsed_ms(&self) -> f64 {
        self.now_ms
    }

    fn spend(&mut self, ms: f64) {
        self.now_ms += ms.max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessingStats {
    pub processed_frames: usize,
    pub skipped_frames: usize,
    /// First frame start to end of result serialization.
    pub processing_ms: f64,
    /// Frame loop only.
    pub frame_loop_ms: f64,
}

impl ProcessingStats {
    pub fn total_frames(&self) -> usize {
        self.processed_frames + self.skipped_frames
    }

    pub fn skip_rate(&self) -> f64 {
        match self.total_frames() {
            0 => 0.0,
            n => self.skipped_frames as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub result: ResultFile,
    /// Serialized result document.
    pub bytes: Vec<u8>,
    pub stats: ProcessingStats,
}

/// Analyses a manifest in real time.
pub fn analyze_video(manifest: &WorkloadManifest, cfg: &AnalysisConfig) -> Result<Analysis, AnalysisError> {
    analyze_video_with(manifest, cfg, &mut WallTimeline::start())
}

pub fn analyze_video_with<T: Timeline>(
    manifest: &WorkloadManifest,
    cfg: &AnalysisConfig,
    timeline: &mut T,
) -> Result<Analysis, AnalysisError> {
    cfg.validate()?;
    manifest.validate()?;
    let start = timeline.elapsed_ms();
    let budget = cfg.budget_ms(manifest.duration_ms);
    let (w, h) = (manifest.width, manifest.height);

    let mut processed = 0usize;
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    for frame in &manifest.frames {
        if budget.is_some_and(|b| timeline.elapsed_ms() - start >= b) {
            break;
        }
        timeline.spend(cfg.frame_cost_ms);
        match manifest.kind {
            VideoKind::Outer => outer.push(classify_outer_frame(frame, cfg, w, h)),
            VideoKind::Inner => inner.push(classify_inner_frame(frame, cfg, w, h)),
        }
        processed += 1;
    }
    let frame_loop_ms = timeline.elapsed_ms() - start;

    let body = match manifest.kind {
        VideoKind::Outer => ResultBody::Outer(outer),
        VideoKind::Inner => ResultBody::Inner(inner),
    };
    let result = ResultFile { name: manifest.name.clone(), body };
    let bytes = result.serialize();
    let processing_ms = timeline.elapsed_ms() - start;
    Ok(Analysis {
        result,
        bytes,
        stats: ProcessingStats {
            processed_frames: processed,
            skipped_frames: manifest.frames.len() - processed,
            processing_ms,
            frame_loop_ms,
        },
    })
}

/// Analyses a manifest that must be of `expected` kind.
pub fn analyze_expecting(
    manifest: &WorkloadManifest,
    expected: VideoKind,
    cfg: &AnalysisConfig,
) -> Result<Analysis, AnalysisError> {
    if manifest.kind != expected {
        return Err(AnalysisError::KindMismatch {
            name: manifest.name.clone(),
            expected,
            found: manifest.kind,
        });
    }
    analyze_video(manifest, cfg)
}
