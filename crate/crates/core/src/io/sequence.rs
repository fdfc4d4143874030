//! Versioned JSON sequence files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "sequence_id": "crossing-7",
//!   "fps": 25.0,
//!   "num_keypoints": 15,
//!   "frames": [
//!     { "index": 0, "image_width": 640, "image_height": 480,
//!       "detections": [
//!         { "box": {"x_min": 0, "y_min": 0, "x_max": 60, "y_max": 150},
//!           "pose": {"keypoints": [{"x": 3.0, "y": 4.0, "confidence": 0.9, "visible": true}, ...]},
//!           "score": 0.95, "identity": 1, "appearance": [...], "duplicate": false } ] } ]
//! }
//! ```
//!
//! `identity`, `appearance`, `heatmaps`, `crop`, `duplicate` and `num_keypoints` are optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::Detection;

pub const SCHEMA_VERSION: u32 = 1;

const TOP_FIELDS: &[&str] = &["version", "sequence_id", "fps", "num_keypoints", "frames"];
const FRAME_FIELDS: &[&str] = &["index", "image_width", "image_height", "detections"];
const DETECTION_FIELDS: &[&str] = &[
    "box",
    "pose",
    "heatmaps",
    "appearance",
    "crop",
    "score",
    "identity",
    "duplicate",
];

/// A detection with optional ground-truth annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDetection {
    #[serde(flatten)]
    pub detection: Detection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u64>,
    /// Marks an injected duplicate of another detection of the same identity.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub detections: Vec<AnnotatedDetection>,
}

impl Frame {
    pub fn plain_detections(&self) -> Vec<Detection> {
        self.detections.iter().map(|d| d.detection.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub version: u32,
    pub sequence_id: String,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_keypoints: Option<usize>,
    pub frames: Vec<Frame>,
}

fn warn_unknown(value: &Value, known: &[&str], ctx: &str) {
    if let Value::Object(map) = value {
        for key in map.keys().filter(|k| !known.contains(&k.as_str())) {
            log::warn!("ignoring unknown field `{key}` in {ctx}");
        }
    }
}

fn unknown_fields(value: &Value) {
    warn_unknown(value, TOP_FIELDS, "sequence");
    let Some(frames) = value.get("frames").and_then(Value::as_array) else {
        return;
    };
    for (f, frame) in frames.iter().enumerate() {
        warn_unknown(frame, FRAME_FIELDS, &format!("frame {f}"));
        if let Some(dets) = frame.get("detections").and_then(Value::as_array) {
            for (i, det) in dets.iter().enumerate() {
                warn_unknown(det, DETECTION_FIELDS, &format!("frame {f} detection {i}"));
            }
        }
    }
}

/// Parses and validates a sequence. Keypoint counts must all equal `num_keypoints`.
pub fn parse_sequence(text: &str, num_keypoints: usize) -> Result<SequenceFile> {
    let value: Value = serde_json::from_str(text)?;
    let version = value.get("version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: version,
        });
    }
    unknown_fields(&value);
    let seq: SequenceFile = serde_json::from_value(value)?;
    validate_sequence(&seq, num_keypoints)?;
    Ok(seq)
}

pub fn validate_sequence(seq: &SequenceFile, num_keypoints: usize) -> Result<()> {
    if let Some(k) = seq.num_keypoints {
        if k != num_keypoints {
            return Err(Error::KeypointCount {
                frame: 0,
                expected: num_keypoints,
                found: k,
            });
        }
    }
    let mut previous: Option<u64> = None;
    for frame in &seq.frames {
        if let Some(p) = previous {
            if frame.index <= p {
                return Err(Error::NonMonotoneFrames {
                    previous: p,
                    next: frame.index,
                });
            }
        }
        previous = Some(frame.index);
        for det in &frame.detections {
            if det.detection.pose.len() != num_keypoints {
                return Err(Error::KeypointCount {
                    frame: frame.index,
                    expected: num_keypoints,
                    found: det.detection.pose.len(),
                });
            }
        }
    }
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>, num_keypoints: usize) -> Result<SequenceFile> {
    let text = std::fs::read_to_string(path)?;
    parse_sequence(&text, num_keypoints)
}

pub fn save_sequence(path: impl AsRef<Path>, seq: &SequenceFile) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, seq)?;
    Ok(())
}
