//! Simplified association metrics.
//!
//! Hypotheses (tracked detections) are matched to ground-truth people per frame by
//! box IoU above 0.5 with a maximum-IoU assignment. `mota_lite` is not comparable
//! to benchmark MOTA numbers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::sequence::SequenceFile;
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::tracker::{hungarian, FrameResult};
use crate::types::{BoundingBox, TrackId};

pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_switches: usize,
    pub association_accuracy: f64,
    pub mota_lite: f64,
    pub misses: usize,
    pub false_positives: usize,
    pub gt_instances: usize,
    pub per_frame: Vec<FrameMetrics>,
}

/// Max-IoU matching of hypotheses to ground truth, pairs must exceed the threshold.
pub fn match_boxes(hyp: &[BoundingBox], gt: &[BoundingBox]) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<f64>> = hyp
        .iter()
        .map(|h| {
            gt.iter()
                .map(|g| {
                    let v = iou(h, g);
                    if v > IOU_MATCH_THRESHOLD {
                        -v
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect();
    hungarian(&cost)
        .into_iter()
        .filter(|&(h, g)| iou(&hyp[h], &gt[g]) > IOU_MATCH_THRESHOLD)
        .collect()
}

/// Scores a result stream. Hypothesis boxes come from `detections` (the file that
/// was tracked); ground-truth people are the non-duplicate, identity-labelled
/// entries of `gt`.
pub fn evaluate(results: &[FrameResult], detections: &SequenceFile, gt: &SequenceFile) -> Result<EvalReport> {
    if results.len() != gt.frames.len() || detections.frames.len() != gt.frames.len() {
        return Err(Error::LengthMismatch {
            results: results.len(),
            gt: gt.frames.len(),
        });
    }
    let mut misses = 0;
    let mut fps = 0;
    let mut gt_total = 0;
    let mut per_frame = Vec::with_capacity(results.len());
    // identity -> sequence of assigned track ids over matched frames
    let mut history: HashMap<u64, Vec<TrackId>> = HashMap::new();

    for ((res, det_frame), gt_frame) in results.iter().zip(&detections.frames).zip(&gt.frames) {
        let hyps: Vec<(BoundingBox, TrackId)> = res
            .assignments
            .iter()
            .chain(&res.new_tracks)
            .filter_map(|a| det_frame.detections.get(a.detection).map(|d| (d.detection.bbox, a.track)))
            .collect();
        let people: Vec<(BoundingBox, u64)> = gt_frame
            .detections
            .iter()
            .filter(|d| !d.duplicate)
            .filter_map(|d| d.identity.map(|id| (d.detection.bbox, id)))
            .collect();
        let hb: Vec<BoundingBox> = hyps.iter().map(|h| h.0).collect();
        let gb: Vec<BoundingBox> = people.iter().map(|p| p.0).collect();
        let pairs = match_boxes(&hb, &gb);
        for &(h, g) in &pairs {
            history.entry(people[g].1).or_default().push(hyps[h].1);
        }
        misses += people.len() - pairs.len();
        fps += hyps.len() - pairs.len();
        gt_total += people.len();
        let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        per_frame.push(FrameMetrics {
            precision: ratio(pairs.len(), hyps.len()),
            recall: ratio(pairs.len(), people.len()),
        });
    }

    let mut switches = 0;
    let mut modal_hits = 0;
    let mut matched = 0;
    for ids in history.values() {
        switches += ids.windows(2).filter(|w| w[0] != w[1]).count();
        let mut counts: HashMap<TrackId, usize> = HashMap::new();
        for &id in ids {
            *counts.entry(id).or_default() += 1;
        }
        modal_hits += counts.values().copied().max().unwrap_or(0);
        matched += ids.len();
    }
    let association_accuracy = if matched == 0 { 0.0 } else { modal_hits as f64 / matched as f64 };
    let mota_lite = if gt_total == 0 {
        1.0
    } else {
        1.0 - (misses + fps + switches) as f64 / gt_total as f64
    };
    Ok(EvalReport {
        id_switches: switches,
        association_accuracy,
        mota_lite,
        misses,
        false_positives: fps,
        gt_instances: gt_total,
        per_frame,
    })
}
