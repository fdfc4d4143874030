//! Online association: assignment with duplicate removal, and the per-frame
//! tracker step with the track lifecycle.

mod hungarian;

use serde::{Deserialize, Serialize};

pub use hungarian::{assignment_cost, hungarian};

use crate::error::{Error, Result};
use crate::geometry::{edge_features, WarpRegistry};
use crate::nn::{Tape, Tensor};
use crate::spapde::{backbone_forward, pose_to_crop, render_heatmaps, stack_images};
use crate::transformer::{FrameOutput, Model};
use crate::types::{Detection, EngineConfig, Track, TrackId};

/// Added to probabilities before taking logs in the assignment cost.
pub const MATCH_EPS: f64 = 1e-12;
/// Cost of a pair the null column dominates; larger than any sum of real costs.
const FORBIDDEN: f64 = 1e6;

/// Outcome of assigning detections given a `D×(T+1)` match matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    /// `(detection, track index)` pairs.
    pub matched: Vec<(usize, usize)>,
    pub duplicates: Vec<usize>,
    pub new: Vec<usize>,
}

/// Hungarian assignment on `−ln(M + ε)` over pairs whose probability beats the
/// null column, then duplicate filtering against the matched tracks.
pub fn assign_and_filter(m: &Tensor, tau_dup: f64) -> Partition {
    let d = m.rows();
    let t = m.cols().saturating_sub(1);
    let allowed = |i: usize, j: usize| m.at(i, j) > m.at(i, t);
    let cost: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..t)
                .map(|j| if allowed(i, j) { -(m.at(i, j) + MATCH_EPS).ln() } else { FORBIDDEN })
                .collect()
        })
        .collect();
    let matched: Vec<(usize, usize)> = if t == 0 {
        Vec::new()
    } else {
        hungarian(&cost).into_iter().filter(|&(i, j)| allowed(i, j)).collect()
    };
    let mut det_matched = vec![false; d];
    let mut track_matched = vec![false; t];
    for &(i, j) in &matched {
        det_matched[i] = true;
        track_matched[j] = true;
    }
    let mut part = Partition {
        matched,
        ..Partition::default()
    };
    for i in (0..d).filter(|&i| !det_matched[i]) {
        let best = (0..t).filter(|&j| track_matched[j]).map(|j| m.at(i, j)).fold(None, |acc: Option<f64>, p| {
            Some(acc.map_or(p, |a| a.max(p)))
        });
        match best {
            Some(p) if p > tau_dup => part.duplicates.push(i),
            _ => part.new.push(i),
        }
    }
    part
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub detection: usize,
    pub track: TrackId,
}

/// What happened to each detection of a frame and which tracks were closed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: u64,
    pub assignments: Vec<Assignment>,
    pub duplicates: Vec<usize>,
    pub new_tracks: Vec<Assignment>,
    pub closed_tracks: Vec<TrackId>,
}

impl FrameResult {
    /// Track id given to detection `i`, if it was matched or started a track.
    pub fn track_of(&self, det: usize) -> Option<TrackId> {
        self.assignments
            .iter()
            .chain(&self.new_tracks)
            .find(|a| a.detection == det)
            .map(|a| a.track)
    }
}

/// All mutable tracking state of one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub tracks: Vec<Track>,
    pub next_id: TrackId,
}

/// Per-detection appearance `D×d`, computed by the backbone for detections that
/// carry a crop but no appearance vector.
pub fn detection_embeddings(dets: &[Detection], model: &Model) -> Result<Tensor> {
    let cfg = &model.config;
    let d = cfg.embed_dim;
    let mut rows: Vec<Option<Vec<f64>>> = Vec::with_capacity(dets.len());
    let mut need_backbone = Vec::new();
    for (i, det) in dets.iter().enumerate() {
        match (&det.appearance, &det.crop) {
            (Some(a), _) => {
                if a.len() != d {
                    return Err(Error::EmbeddingDim {
                        expected: d,
                        found: a.len(),
                    });
                }
                rows.push(Some(a.clone()));
            }
            (None, Some(_)) if model.has_backbone() => {
                need_backbone.push(i);
                rows.push(None);
            }
            _ => return Err(Error::MissingAppearance { index: i }),
        }
    }
    if !need_backbone.is_empty() {
        let crops: Vec<&Tensor> = need_backbone.iter().map(|&i| dets[i].crop.as_ref().expect("checked")).collect();
        let rendered: Vec<Tensor> = need_backbone
            .iter()
            .map(|&i| match &dets[i].heatmaps {
                Some(h) => h.grid.clone(),
                None => {
                    let pose = pose_to_crop(&dets[i].pose, &dets[i].bbox, cfg.crop_height, cfg.crop_width);
                    render_heatmaps(&pose, cfg.crop_height, cfg.crop_width, cfg.heatmap_sigma()).grid
                }
            })
            .collect();
        let mut tape = Tape::new();
        let c = tape.leaf(stack_images(&crops)?);
        let h = tape.leaf(stack_images(&rendered.iter().collect::<Vec<_>>())?);
        let out = backbone_forward(&mut tape, &model.params, c, Some(h))?;
        let emb = tape.value(out.embeddings);
        for (k, &i) in need_backbone.iter().enumerate() {
            rows[i] = Some(emb.row(k).to_vec());
        }
    }
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.expect("filled")).collect();
    Tensor::from_rows(&rows, d)
}

fn track_matrix(tracks: &[Track], d: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = tracks.iter().map(|t| t.embedding.clone()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::EmbeddingDim {
            expected: d,
            found: bad.len(),
        });
    }
    Tensor::from_rows(&rows, d)
}

/// Runs one frame: forward pass, assignment, embedding updates, new tracks and aging.
///
/// Returns the frame result and the raw forward outputs.
pub fn step(
    state: &mut TrackerState,
    frame: u64,
    dets: &[Detection],
    model: &Model,
    registry: &WarpRegistry,
) -> Result<(FrameResult, FrameOutput)> {
    let cfg: &EngineConfig = &model.config;
    for (index, det) in dets.iter().enumerate() {
        det.validate(cfg).map_err(|reason| Error::InvalidDetection { index, reason })?;
    }
    let e_d = detection_embeddings(dets, model)?;
    let e_t = track_matrix(&state.tracks, cfg.embed_dim)?;
    let edges = edge_features(&state.tracks, dets, cfg, registry)?;
    let raw = Tensor::matrix(edges.tracks * edges.detections, 4, edges.flat())?;
    let out = model.forward(&e_t, &e_d, &raw)?;
    let part = assign_and_filter(&out.match_matrix, cfg.tau_dup);

    let mut result = FrameResult {
        frame,
        duplicates: part.duplicates.clone(),
        ..FrameResult::default()
    };
    let mut matched_det = vec![None; state.tracks.len()];
    for &(i, j) in &part.matched {
        matched_det[j] = Some(i);
        result.assignments.push(Assignment {
            detection: i,
            track: state.tracks[j].id,
        });
    }

    let mut kept = Vec::with_capacity(state.tracks.len() + part.new.len());
    for (j, mut track) in std::mem::take(&mut state.tracks).into_iter().enumerate() {
        track.embedding = out.track_embeddings.row(j).to_vec();
        match matched_det[j] {
            Some(i) => {
                track.last_pose = dets[i].pose.clone();
                track.last_box = dets[i].bbox;
                track.frames_since_match = 0;
                track.active = true;
            }
            None => {
                track.frames_since_match += 1;
                track.active = false;
            }
        }
        if track.frames_since_match > cfg.tau_age {
            result.closed_tracks.push(track.id);
        } else {
            kept.push(track);
        }
    }

    if !part.new.is_empty() {
        let rows: Vec<Vec<f64>> = part.new.iter().map(|&i| out.encoded.row(i).to_vec()).collect();
        let emb = model.new_track_embeddings(&Tensor::from_rows(&rows, cfg.embed_dim)?)?;
        for (k, &i) in part.new.iter().enumerate() {
            let id = state.next_id;
            state.next_id += 1;
            kept.push(Track {
                id,
                embedding: emb.row(k).to_vec(),
                last_pose: dets[i].pose.clone(),
                last_box: dets[i].bbox,
                frames_since_match: 0,
                active: true,
            });
            result.new_tracks.push(Assignment { detection: i, track: id });
        }
    }
    state.tracks = kept;
    result.assignments.sort_by_key(|a| a.detection);
    Ok((result, out))
}

/// A model, a warper registry and the state of one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub model: Model,
    pub registry: WarpRegistry,
    pub state: TrackerState,
}

impl Tracker {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            registry: WarpRegistry::new(),
            state: TrackerState::default(),
        }
    }

    pub fn with_registry(mut self, registry: WarpRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn step(&mut self, frame: u64, dets: &[Detection]) -> Result<FrameResult> {
        Ok(self.step_detailed(frame, dets)?.0)
    }

    pub fn step_detailed(&mut self, frame: u64, dets: &[Detection]) -> Result<(FrameResult, FrameOutput)> {
        step(&mut self.state, frame, dets, &self.model, &self.registry)
    }

    pub fn tracks(&self) -> &[Track] {
        &self.state.tracks
    }

    pub fn reset(&mut self) {
        self.state = TrackerState::default();
    }
}
