//! Shared domain types: commands, workloads, hardware descriptors and endpoints.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instruction carried by a byte payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    /// Analyse the paired video.
    Analyse,
    /// Analyse the paired video, which is a segment of a larger one.
    Segment,
    /// The file transfer identified by the sender's last payload succeeded.
    Complete,
    /// Paired file is a result file.
    Return,
    /// Ask the receiver for its hardware information.
    HwInfoRequest,
    /// Message carries JSON-encoded hardware information.
    HwInfo,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Analyse,
        Command::Segment,
        Command::Complete,
        Command::Return,
        Command::HwInfoRequest,
        Command::HwInfo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Analyse => "ANALYSE",
            Command::Segment => "SEGMENT",
            Command::Complete => "COMPLETE",
            Command::Return => "RETURN",
            Command::HwInfoRequest => "HW_INFO_REQUEST",
            Command::HwInfo => "HW_INFO",
        }
    }

    /// Commands that are always paired with a file payload.
    pub fn carries_file(self) -> bool {
        matches!(self, Command::Analyse | Command::Segment | Command::Return)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown command `{0}`")]
pub struct UnknownCommand(pub String);

impl FromStr for Command {
    type Err = UnknownCommand;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCommand(s.to_string()))
    }
}

/// Which camera a video came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoKind {
    /// Forward-facing camera, analysed for road hazards.
    Outer,
    /// Driver-facing camera, analysed for distraction.
    Inner,
}

impl VideoKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VideoKind::Outer => "outer",
            VideoKind::Inner => "inner",
        }
    }
}

impl fmt::Display for VideoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VideoKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outer" => Ok(VideoKind::Outer),
            "inner" => Ok(VideoKind::Inner),
            other => Err(format!("unknown video kind `{other}`")),
        }
    }
}

/// The 17 body parts of the single-person pose convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Nose,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl BodyPart {
    pub const ALL: [BodyPart; 17] = [
        BodyPart::Nose,
        BodyPart::LeftEye,
        BodyPart::RightEye,
        BodyPart::LeftEar,
        BodyPart::RightEar,
        BodyPart::LeftShoulder,
        BodyPart::RightShoulder,
        BodyPart::LeftElbow,
        BodyPart::RightElbow,
        BodyPart::LeftWrist,
        BodyPart::RightWrist,
        BodyPart::LeftHip,
        BodyPart::RightHip,
        BodyPart::LeftKnee,
        BodyPart::RightKnee,
        BodyPart::LeftAnkle,
        BodyPart::RightAnkle,
    ];

    pub fn is_wrist(self) -> bool {
        matches!(self, BodyPart::LeftWrist | BodyPart::RightWrist)
    }

    pub fn is_eye(self) -> bool {
        matches!(self, BodyPart::LeftEye | BodyPart::RightEye)
    }

    pub fn is_ear(self) -> bool {
        matches!(self, BodyPart::LeftEar | BodyPart::RightEar)
    }
}

/// Integer pixel edges of a detection. Field order is the serialized key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub bottom: i32,
    pub left: i32,
    pub right: i32,
    pub top: i32,
}

impl BoundingBox {
    pub fn new(left: i32, top: i32, right: i32, bottom: i32) -> Self {
        BoundingBox { bottom, left, right, top }
    }

    /// Edges clamped into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: u32, height: u32) -> BoundingBox {
        let w = width as i32;
        let h = height as i32;
        BoundingBox {
            bottom: self.bottom.clamp(0, h),
            left: self.left.clamp(0, w),
            right: self.right.clamp(0, w),
            top: self.top.clamp(0, h),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.left as f64 + self.right as f64) / 2.0,
            (self.top as f64 + self.bottom as f64) / 2.0,
        )
    }

    pub fn area(&self) -> i64 {
        (self.right as i64 - self.left as i64).max(0) * (self.bottom as i64 - self.top as i64).max(0)
    }
}

/// One object reported by the detection model for a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDetection {
    pub category: String,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// One body part reported by the pose model. Coordinates use a top-left
/// origin and may fall outside the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawKeypoint {
    pub part: BodyPart,
    pub score: f64,
    pub x: i32,
    pub y: i32,
}

/// Model output for one frame; stands in for the decoded bitmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detections: Vec<RawDetection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints: Vec<RawKeypoint>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifestError {
    #[error("manifest `{name}`: {field} must be positive")]
    NonPositive { name: String, field: &'static str },
    #[error("manifest `{name}`: expected {expected} frames for {duration_ms} ms at {fps} fps, found {found}")]
    FrameCount {
        name: String,
        expected: u64,
        found: usize,
        duration_ms: u64,
        fps: u32,
    },
    #[error("manifest `{name}`: frame at position {position} has index {index}")]
    NonContiguous { name: String, position: usize, index: u32 },
    #[error("manifest `{name}`: frame {index} carries {found} in a {kind} video")]
    KindMismatch {
        name: String,
        index: u32,
        kind: VideoKind,
        found: &'static str,
    },
    #[error("manifest `{name}`: frame {index} has a degenerate bounding box")]
    DegenerateBox { name: String, index: u32 },
    #[error("manifest `{name}`: score {score} out of [0, 1] in frame {index}")]
    Score { name: String, index: u32, score: f64 },
    #[error("invalid manifest JSON: {0}")]
    Json(String),
}

/// A video stand-in: per-frame raw model outputs plus timing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadManifest {
    pub name: String,
    pub kind: VideoKind,
    pub duration_ms: u64,
    pub fps: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub origin_frame_offset: u32,
    pub frames: Vec<FrameRecord>,
}

/// `round(duration_ms / 1000 * fps)` in integer arithmetic.
pub fn expected_frame_count(duration_ms: u64, fps: u32) -> u64 {
    (duration_ms * fps as u64 + 500) / 1000
}

impl WorkloadManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ManifestError> {
        let m: WorkloadManifest =
            serde_json::from_slice(bytes).map_err(|e| ManifestError::Json(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("manifest serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let name = || self.name.clone();
        for (field, value) in [
            ("duration_ms", self.duration_ms),
            ("fps", self.fps as u64),
            ("width", self.width as u64),
            ("height", self.height as u64),
        ] {
            if value == 0 {
                return Err(ManifestError::NonPositive { name: name(), field });
            }
        }
        let expected = expected_frame_count(self.duration_ms, self.fps);
        if self.frames.len() as u64 != expected {
            return Err(ManifestError::FrameCount {
                name: name(),
                expected,
                found: self.frames.len(),
                duration_ms: self.duration_ms,
                fps: self.fps,
            });
        }
        for (position, frame) in self.frames.iter().enumerate() {
            if frame.index as usize != position {
                return Err(ManifestError::NonContiguous {
                    name: name(),
                    position,
                    index: frame.index,
                });
            }
            let stray = match self.kind {
                VideoKind::Outer if !frame.keypoints.is_empty() => Some("keypoints"),
                VideoKind::Inner if !frame.detections.is_empty() => Some("detections"),
                _ => None,
            };
            if let Some(found) = stray {
                return Err(ManifestError::KindMismatch {
                    name: name(),
                    index: frame.index,
                    kind: self.kind,
                    found,
                });
            }
            for d in &frame.detections {
                if d.bbox.left >= d.bbox.right || d.bbox.top >= d.bbox.bottom {
                    return Err(ManifestError::DegenerateBox { name: name(), index: frame.index });
                }
            }
            let scores = frame
                .detections
                .iter()
                .map(|d| d.score)
                .chain(frame.keypoints.iter().map(|k| k.score));
            for score in scores {
                if !(0.0..=1.0).contains(&score) {
                    return Err(ManifestError::Score { name: name(), index: frame.index, score });
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// A node's capacity descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardwareInfo {
    /// Highest core-cluster frequency.
    pub cpu_freq_mhz: u32,
    pub cpu_cores: u32,
    pub total_ram_mb: u64,
    pub avail_ram_mb: u64,
    pub total_storage_mb: u64,
    pub avail_storage_mb: u64,
    pub battery_pct: u8,
}

/// Lexicographically ordered processing capacity; greater is stronger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CapacityScore {
    pub compute: u64,
    pub total_ram_mb: u64,
    pub avail_ram_mb: u64,
    pub battery_pct: u8,
}

impl HardwareInfo {
    pub fn capacity_score(&self) -> CapacityScore {
        CapacityScore {
            compute: self.cpu_freq_mhz as u64 * self.cpu_cores as u64,
            total_ram_mb: self.total_ram_mb,
            avail_ram_mb: self.avail_ram_mb,
            battery_pct: self.battery_pct,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.avail_ram_mb > self.total_ram_mb {
            return Err("avail_ram_mb exceeds total_ram_mb".into());
        }
        if self.avail_storage_mb > self.total_storage_mb {
            return Err("avail_storage_mb exceeds total_storage_mb".into());
        }
        if self.battery_pct > 100 {
            return Err("battery_pct exceeds 100".into());
        }
        Ok(())
    }
}

/// Hardware profiles of the evaluated phone classes.
pub mod profiles {
    use super::HardwareInfo;

    const fn phone(cpu_freq_mhz: u32, ram_gb: u64) -> HardwareInfo {
        HardwareInfo {
            cpu_freq_mhz,
            cpu_cores: 8,
            total_ram_mb: ram_gb * 1024,
            avail_ram_mb: ram_gb * 512,
            total_storage_mb: 131_072,
            avail_storage_mb: 65_536,
            battery_pct: 100,
        }
    }

    pub const PIXEL_3: HardwareInfo = phone(2500, 4);
    pub const PIXEL_6: HardwareInfo = phone(2800, 8);
    pub const ONEPLUS_8: HardwareInfo = phone(2840, 8);
    pub const FIND_X2_PRO: HardwareInfo = phone(2840, 12);

    pub fn by_name(name: &str) -> Option<HardwareInfo> {
        match name.to_ascii_lowercase().replace([' ', '-', '_'], "").as_str() {
            "pixel3" => Some(PIXEL_3),
            "pixel6" => Some(PIXEL_6),
            "oneplus8" => Some(ONEPLUS_8),
            "findx2pro" => Some(FIND_X2_PRO),
            _ => None,
        }
    }
}

/// A connected peer as seen by the local node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: String,
    pub name: String,
    pub connected: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inner_manifest(frames: u32) -> WorkloadManifest {
        WorkloadManifest {
            name: "in_0000".into(),
            kind: VideoKind::Inner,
            duration_ms: frames as u64 * 1000 / 30,
            fps: 30,
            width: 1280,
            height: 720,
            origin_frame_offset: 0,
            frames: (0..frames)
                .map(|index| FrameRecord { index, detections: vec![], keypoints: vec![] })
                .collect(),
        }
    }

    #[test]
    fn command_names() {
        assert_eq!(Command::Analyse.to_string(), "ANALYSE");
        assert_eq!(Command::HwInfoRequest.to_string(), "HW_INFO_REQUEST");
        assert_eq!("RETURN".parse::<Command>(), Ok(Command::Return));
        assert!("analyse".parse::<Command>().is_err());
        for c in Command::ALL {
            assert_eq!(c.as_str().parse::<Command>(), Ok(c));
        }
    }

    #[test]
    fn find_x2_beats_oneplus_on_ram() {
        let find = profiles::FIND_X2_PRO.capacity_score();
        let oneplus = profiles::ONEPLUS_8.capacity_score();
        assert_eq!(find.compute, oneplus.compute);
        assert!(find > oneplus);
        assert_eq!(find, profiles::FIND_X2_PRO.capacity_score());
        assert!(profiles::PIXEL_6.capacity_score() > profiles::PIXEL_3.capacity_score());
        assert!(oneplus > profiles::PIXEL_6.capacity_score());
    }

    #[test]
    fn manifest_validation() {
        let mut m = inner_manifest(30);
        m.duration_ms = 1000;
        m.validate().unwrap();

        let mut gap = m.clone();
        gap.frames[7].index = 8;
        assert!(matches!(gap.validate(), Err(ManifestError::NonContiguous { position: 7, .. })));

        let mut short = m.clone();
        short.frames.pop();
        assert!(matches!(short.validate(), Err(ManifestError::FrameCount { expected: 30, found: 29, .. })));

        let mut mixed = m.clone();
        mixed.frames[3].detections.push(RawDetection {
            category: "car".into(),
            score: 0.5,
            bbox: BoundingBox::new(0, 0, 10, 10),
        });
        assert!(matches!(mixed.validate(), Err(ManifestError::KindMismatch { index: 3, .. })));
    }

    #[test]
    fn manifest_json_round_trip() {
        let mut m = inner_manifest(30);
        m.duration_ms = 1000;
        m.frames[0].keypoints.push(RawKeypoint { part: BodyPart::LeftWrist, score: 0.9, x: 10, y: 20 });
        let back = WorkloadManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let text = String::from_utf8(m.to_json()).unwrap();
        assert!(text.contains("\"left_wrist\""));
        assert!(text.contains("\"kind\":\"inner\""));
    }

    #[test]
    fn clamp_box() {
        let b = BoundingBox::new(-20, 700, 1300, 800).clamped(1280, 720);
        assert_eq!(b, BoundingBox::new(0, 700, 1280, 720));
    }

    fn hw() -> impl Strategy<Value = HardwareInfo> {
        (1000u32..3000, 1u32..9, 1u64..16, 0u8..=100).prop_flat_map(|(f, c, ram, bat)| {
            (0..=ram * 1024).prop_map(move |avail| HardwareInfo {
                cpu_freq_mhz: f,
                cpu_cores: c,
                total_ram_mb: ram * 1024,
                avail_ram_mb: avail,
                total_storage_mb: 1000,
                avail_storage_mb: 500,
                battery_pct: bat,
            })
        })
    }

    proptest! {
        #[test]
        fn capacity_is_total_order(a in hw(), b in hw(), c in hw()) {
            let (sa, sb, sc) = (a.capacity_score(), b.capacity_score(), c.capacity_score());
            if sa <= sb && sb <= sa {
                prop_assert_eq!(sa, sb);
            }
            if sa <= sb && sb <= sc {
                prop_assert!(sa <= sc);
            }
            prop_assert!(sa <= sb || sb <= sa);
        }
    }
}
