//! Online multi-person pose tracking with a dual-source attention transformer.
//!
//! Per frame the engine encodes detection appearance, measures temporal box/pose
//! similarity to existing tracks, fuses both sources with an alpha gate inside a
//! small transformer decoder, and assigns detections to tracks with duplicate
//! removal and confidence-guided embedding updates.

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod nn;
pub mod spapde;
pub mod tracker;
pub mod training;
pub mod transformer;
pub mod types;

pub use error::{ConfigError, Error, Result};
pub use tracker::{FrameResult, Tracker, TrackerState};
pub use transformer::Model;
pub use types::{
    validate_config, BoundingBox, Detection, EdgeUpdate, EngineConfig, Keypoint, Pose, Track, TrackId,
    WarpMode,
};
