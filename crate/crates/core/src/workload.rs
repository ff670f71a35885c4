//! Synthetic workload catalogs: seeded, paired outer/inner manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::model::{
    expected_frame_count, BodyPart, BoundingBox, FrameRecord, RawDetection, RawKeypoint, VideoKind, WorkloadManifest,
};

const VEHICLES: [&str; 4] = ["car", "truck", "bus", "motorcycle"];
const OTHERS: [&str; 4] = ["person", "bicycle", "dog", "traffic light"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub pairs: usize,
    pub duration_ms: u64,
    #[serde(default = "default_fps")]
    pub fps: u32,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub content: ContentSpec,
}

/// Per-frame content knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentSpec {
    /// Outer frames carry between 0 and this many detections.
    pub max_detections: u32,
    /// Chance that a detection is placed to trigger a hazard.
    pub hazard_rate: f64,
    /// Chance that an inner frame shows a distracted driver.
    pub distraction_rate: f64,
    /// Chance that a keypoint comes out with a low score.
    pub occlusion_rate: f64,
}

impl Default for ContentSpec {
    fn default() -> Self {
        ContentSpec { max_detections: 3, hazard_rate: 0.1, distraction_rate: 0.1, occlusion_rate: 0.05 }
    }
}

fn default_fps() -> u32 {
    30
}

fn default_width() -> u32 {
    1280
}

fn default_height() -> u32 {
    720
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.pairs == 0 || self.pairs > 10_000 {
            return bad("pairs must be in 1..=10000");
        }
        if self.duration_ms == 0 || self.fps == 0 || self.width < 16 || self.height < 16 {
            return bad("duration_ms and fps must be positive and the frame at least 16x16");
        }
        if expected_frame_count(self.duration_ms, self.fps) == 0 {
            return bad("duration_ms at this fps yields no frames");
        }
        let c = &self.content;
        if ![c.hazard_rate, c.distraction_rate, c.occlusion_rate].iter().all(|r| (0.0..=1.0).contains(r)) {
            return bad("content rates must be in [0, 1]");
        }
        Ok(())
    }
}

fn span(rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: u32) -> i32 {
    (rng.gen_range(lo..hi) * extent as f64) as i32
}

fn outer_frame(rng: &mut ChaCha8Rng, spec: &GenSpec, index: u32) -> FrameRecord {
    let (w, h) = (spec.width, spec.height);
    let n = rng.gen_range(0..=spec.content.max_detections);
    let detections = (0..n)
        .map(|_| {
            let vehicle = rng.gen_bool(0.6);
            let category = if vehicle { VEHICLES[rng.gen_range(0..4)] } else { OTHERS[rng.gen_range(0..4)] };
            let hazard = rng.gen_bool(spec.content.hazard_rate);
            let bbox = if hazard && vehicle {
                // close vehicle: well over a tenth of the frame
                let l = span(rng, 0.15, 0.35, w);
                let t = span(rng, 0.35, 0.55, h);
                BoundingBox::new(l, t, l + span(rng, 0.4, 0.6, w), t + span(rng, 0.35, 0.45, h))
            } else if hazard {
                // centre lands in the lower-middle road region
                let cx = span(rng, 0.35, 0.65, w);
                let cy = span(rng, 0.75, 0.9, h);
                let (hw, hh) = (span(rng, 0.02, 0.05, w), span(rng, 0.02, 0.05, h));
                BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
            } else {
                // small and high in the frame
                let l = span(rng, 0.0, 0.85, w);
                let t = span(rng, 0.0, 0.4, h);
                BoundingBox::new(l, t, l + span(rng, 0.03, 0.1, w), t + span(rng, 0.03, 0.1, h))
            };
            RawDetection { category: category.to_string(), score: rng.gen_range(0.3..1.0), bbox }
        })
        .collect();
    FrameRecord { index, detections, keypoints: Vec::new() }
}

fn inner_frame(rng: &mut ChaCha8Rng, spec: &GenSpec, index: u32) -> FrameRecord {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let distracted = rng.gen_bool(spec.content.distraction_rate);
    let raised_hand = distracted && rng.gen_bool(0.5);
    let head_down = distracted && !raised_hand;
    let head_y = h * rng.gen_range(0.25..0.35);
    let keypoints = BodyPart::ALL
        .iter()
        .map(|&part| {
            let x = w * rng.gen_range(0.35..0.65);
            let y = if part.is_eye() {
                if head_down {
                    head_y + h * 0.04
                } else {
                    head_y - h * 0.02
                }
            } else if part.is_ear() {
                head_y
            } else if part.is_wrist() {
                if raised_hand {
                    h * rng.gen_range(0.05..0.2)
                } else {
                    h * rng.gen_range(0.7..0.9)
                }
            } else if part == BodyPart::Nose {
                head_y + h * 0.02
            } else {
                h * rng.gen_range(0.45..0.95)
            };
            let occluded = rng.gen_bool(spec.content.occlusion_rate);
            let score = if occluded { rng.gen_range(0.0..0.25) } else { rng.gen_range(0.5..1.0) };
            RawKeypoint { part, score, x: x as i32, y: y as i32 }
        })
        .collect();
    FrameRecord { index, detections: Vec::new(), keypoints }
}

pub fn outer_name(pair: usize) -> String {
    format!("out_{pair:04}")
}

pub fn inner_name(pair: usize) -> String {
    format!("in_{pair:04}")
}

type FrameFn = fn(&mut ChaCha8Rng, &GenSpec, u32) -> FrameRecord;

/// Builds the manifests in pair order: out_0000, in_0000, out_0001, ...
pub fn generate(spec: &GenSpec) -> Result<Vec<WorkloadManifest>, ConfigError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = expected_frame_count(spec.duration_ms, spec.fps) as u32;
    let mut out = Vec::with_capacity(spec.pairs * 2);
    for pair in 0..spec.pairs {
        for kind in [VideoKind::Outer, VideoKind::Inner] {
            let (name, frame_fn): (String, FrameFn) = match kind {
                VideoKind::Outer => (outer_name(pair), outer_frame),
                VideoKind::Inner => (inner_name(pair), inner_frame),
            };
            let m = WorkloadManifest {
                name,
                kind,
                duration_ms: spec.duration_ms,
                fps: spec.fps,
                width: spec.width,
                height: spec.height,
                origin_frame_offset: 0,
                frames: (0..frames).map(|i| frame_fn(&mut rng, spec, i)).collect(),
            };
            m.validate().map_err(|e| ConfigError::Invalid(format!("generated an invalid manifest: {e}")))?;
            out.push(m);
        }
    }
    Ok(out)
}

/// Writes `<name>.json` per manifest into `spec.output_dir`.
pub fn gen_workloads(spec: &GenSpec) -> Result<Vec<PathBuf>, ConfigError> {
    let manifests = generate(spec)?;
    write_catalog(&spec.output_dir, &manifests)
}

pub fn write_catalog(dir: &Path, manifests: &[WorkloadManifest]) -> Result<Vec<PathBuf>, ConfigError> {
    let io = |path: &Path, source| ConfigError::Io { path: path.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    manifests
        .iter()
        .map(|m| {
            let path = dir.join(format!("{}.json", m.name));
            std::fs::write(&path, m.to_json()).map_err(|e| io(&path, e))?;
            Ok(path)
        })
        .collect()
}
