//! Splitting workloads into equal segments and merging their results.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::WorkloadManifest;
use crate::result::{ResultBody, ResultFile};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("cannot split `{name}` ({frames} frames) into {segments} segments")]
    TooManySegments { name: String, frames: usize, segments: usize },
    #[error("segment count must be at least 1")]
    ZeroSegments,
    #[error("`{part}` is not a segment of `{original}`")]
    ForeignPart { part: String, original: String },
    #[error("segment suffix {0} appears more than once")]
    DuplicateSuffix(usize),
    #[error("missing segment suffixes {missing:?} of `{original}`")]
    MissingSuffixes { original: String, missing: Vec<usize> },
    #[error("segment `{0}` has a different video kind")]
    MixedKinds(String),
}

pub fn segment_name(original: &str, index: usize) -> String {
    format!("{original}_{index}")
}

/// Parses the order suffix of `part` if it is a segment of `original`.
pub fn segment_index(original: &str, part: &str) -> Option<usize> {
    part.strip_prefix(original)?.strip_prefix('_')?.parse().ok()
}

/// Splits into `n` contiguous segments; the first `frames % n` get one
/// extra frame. Segment frames are re-indexed from 0 and
/// `origin_frame_offset` records where each one starts.
pub fn split_video(m: &WorkloadManifest, n: usize) -> Result<Vec<WorkloadManifest>, SegmentError> {
    let total = m.frames.len();
    if n == 0 {
        return Err(SegmentError::ZeroSegments);
    }
    if n > total {
        return Err(SegmentError::TooManySegments { name: m.name.clone(), frames: total, segments: n });
    }
    let base = total / n;
    let extra = total % n;
    // round(duration * frames_before / total), so durations sum exactly
    let boundary_ms = |frames_before: usize| (m.duration_ms * frames_before as u64 * 2 + total as u64) / (2 * total as u64);

    let mut segments = Vec::with_capacity(n);
    let mut start = 0usize;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        let frames = m.frames[start..start + len]
            .iter()
            .enumerate()
            .map(|(local, f)| {
                let mut f = f.clone();
                f.index = local as u32;
                f
            })
            .collect();
        segments.push(WorkloadManifest {
            name: segment_name(&m.name, i),
            kind: m.kind,
            duration_ms: boundary_ms(start + len) - boundary_ms(start),
            fps: m.fps,
            width: m.width,
            height: m.height,
            origin_frame_offset: m.origin_frame_offset + start as u32,
            frames,
        });
        start += len;
    }
    Ok(segments)
}

/// A segment's result together with the segment's frame offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub result: ResultFile,
    pub origin_frame_offset: u32,
}

/// Concatenates segment results in suffix order, shifting local frame
/// indices by each segment's offset. All `expected` suffixes must be present.
pub fn merge_results(
    parts: Vec<SegmentResult>,
    original_name: &str,
    expected: usize,
) -> Result<ResultFile, SegmentError> {
    let mut ordered: BTreeMap<usize, SegmentResult> = BTreeMap::new();
    for part in parts {
        let idx = segment_index(original_name, &part.result.name).ok_or_else(|| SegmentError::ForeignPart {
            part: part.result.name.clone(),
            original: original_name.to_string(),
        })?;
        if ordered.insert(idx, part).is_some() {
            return Err(SegmentError::DuplicateSuffix(idx));
        }
    }
    let missing: Vec<usize> = (0..expected.max(ordered.keys().next_back().map_or(0, |k| k + 1)))
        .filter(|i| !ordered.contains_key(i))
        .collect();
    if !missing.is_empty() || ordered.is_empty() {
        return Err(SegmentError::MissingSuffixes { original: original_name.to_string(), missing });
    }

    let mut iter = ordered.into_values();
    let first = iter.next().expect("checked non-empty");
    let mut body = first.result.body;
    body.shift_frames(first.origin_frame_offset);
    for part in iter {
        let name = part.result.name;
        let mut next = part.result.body;
        next.shift_frames(part.origin_frame_offset);
        match (&mut body, next) {
            (ResultBody::Outer(acc), ResultBody::Outer(more)) => acc.extend(more),
            (ResultBody::Inner(acc), ResultBody::Inner(more)) => acc.extend(more),
            _ => return Err(SegmentError::MixedKinds(name)),
        }
    }
    Ok(ResultFile { name: original_name.to_string(), body })
}
