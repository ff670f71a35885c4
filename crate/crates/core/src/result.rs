//! Result documents written after analysing a video.
//!
//! Outer results are an array of `{"frame", "detections"}` objects, inner
//! results an array of `{"frame", "distracted", "keypoints"}` objects. Both are
//! written as UTF-8 with two-space indentation and keys in declaration order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BodyPart, BoundingBox, VideoKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlaggedDetection {
    pub category: String,
    pub danger: bool,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterFrameResult {
    pub frame: u32,
    pub detections: Vec<FlaggedDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointEntry {
    pub part: BodyPart,
    pub score: f64,
    pub x: i32,
    pub y: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerFrameResult {
    pub frame: u32,
    pub distracted: bool,
    pub keypoints: Vec<KeypointEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResultBody {
    Outer(Vec<OuterFrameResult>),
    Inner(Vec<InnerFrameResult>),
}

impl ResultBody {
    pub fn kind(&self) -> VideoKind {
        match self {
            ResultBody::Outer(_) => VideoKind::Outer,
            ResultBody::Inner(_) => VideoKind::Inner,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ResultBody::Outer(f) => f.len(),
            ResultBody::Inner(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame indices in document order.
    pub fn frame_indices(&self) -> Vec<u32> {
        match self {
            ResultBody::Outer(f) => f.iter().map(|r| r.frame).collect(),
            ResultBody::Inner(f) => f.iter().map(|r| r.frame).collect(),
        }
    }

    pub(crate) fn shift_frames(&mut self, offset: u32) {
        match self {
            ResultBody::Outer(f) => f.iter_mut().for_each(|r| r.frame += offset),
            ResultBody::Inner(f) => f.iter_mut().for_each(|r| r.frame += offset),
        }
    }
}

/// A named, typed result document.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultFile {
    /// Name of the source video or segment.
    pub name: String,
    pub body: ResultBody,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("malformed {kind} result `{name}`: {reason}")]
pub struct ResultParseError {
    pub name: String,
    pub kind: VideoKind,
    pub reason: String,
}

impl ResultFile {
    pub fn kind(&self) -> VideoKind {
        self.body.kind()
    }

    /// Wire/disk file name for this result.
    pub fn file_name(&self) -> String {
        result_file_name(&self.name)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let bytes = match &self.body {
            ResultBody::Outer(frames) => serde_json::to_vec_pretty(frames),
            ResultBody::Inner(frames) => serde_json::to_vec_pretty(frames),
        };
        bytes.expect("result serialization is infallible")
    }

    /// Parses a document of a known kind. Errors carry the path of the
    /// offending field.
    pub fn parse(name: &str, kind: VideoKind, bytes: &[u8]) -> Result<Self, ResultParseError> {
        let err = |e: serde_path_to_error::Error<serde_json::Error>| ResultParseError {
            name: name.to_string(),
            kind,
            reason: format!("at `{}`: {}", e.path(), e.inner()),
        };
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let body = match kind {
            VideoKind::Outer => ResultBody::Outer(serde_path_to_error::deserialize(&mut *de).map_err(err)?),
            VideoKind::Inner => ResultBody::Inner(serde_path_to_error::deserialize(&mut *de).map_err(err)?),
        };
        de.end().map_err(|e| ResultParseError {
            name: name.to_string(),
            kind,
            reason: e.to_string(),
        })?;
        Ok(ResultFile { name: name.to_string(), body })
    }
}

pub const RESULT_SUFFIX: &str = ".result.json";

pub fn result_file_name(video: &str) -> String {
    format!("{video}{RESULT_SUFFIX}")
}
