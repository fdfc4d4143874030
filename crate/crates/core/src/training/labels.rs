//! Ground-truth identity labels for detections, tracks and attention targets.

use crate::geometry::oks_triplet;
use crate::nn::Tensor;
use crate::types::{BoundingBox, Pose};

/// Pairs with shared-keypoint OKS at or below this value are never matched.
pub const OKS_FLOOR: f64 = 0.3;

/// One ground-truth person.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPerson {
    pub pose: Pose,
    pub bbox: BoundingBox,
    pub identity: u64,
}

/// Greedy matching on shared-keypoint OKS: repeatedly takes the globally best
/// remaining (detection, person) pair above [`OKS_FLOOR`]. Ties go to the lower
/// detection index, then the lower person index.
pub fn greedy_identity_assignment(dets: &[Pose], gt: &[GtPerson], kappas: &[f64]) -> Vec<Option<u64>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(dets.len() * gt.len());
    for (i, p) in dets.iter().enumerate() {
        for (g, person) in gt.iter().enumerate() {
            let s = oks_triplet(p, &person.pose, &person.bbox, kappas)[0];
            if s > OKS_FLOOR {
                pairs.push((s, i, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels = vec![None; dets.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, i, g) in pairs {
        if labels[i].is_none() && !gt_used[g] {
            labels[i] = Some(gt[g].identity);
            gt_used[g] = true;
        }
    }
    labels
}

/// Target column per detection in a `D×(T+1)` match matrix: the track with the same
/// identity, or `None` for the null column.
pub fn match_targets(det_ids: &[Option<u64>], track_ids: &[u64]) -> Vec<Option<usize>> {
    det_ids
        .iter()
        .map(|id| id.and_then(|id| track_ids.iter().position(|&t| t == id)))
        .collect()
}

/// `T×(D+1)` mask for the decoder attention loss: a track row marks every
/// detection with its identity, or the null column when there is none.
pub fn decoder_attention_mask(track_ids: &[u64], det_ids: &[Option<u64>]) -> Tensor {
    let d = det_ids.len();
    let mut mask = Tensor::zeros(&[track_ids.len(), d + 1]);
    for (j, &tid) in track_ids.iter().enumerate() {
        let mut any = false;
        for (i, did) in det_ids.iter().enumerate() {
            if *did == Some(tid) {
                mask.set(j, i, 1.0);
                any = true;
            }
        }
        if !any {
            mask.set(j, d, 1.0);
        }
    }
    mask
}

/// `D×(D+1)` mask for the encoder attention loss: each detection attends to its
/// identity group including itself; unlabelled detections attend to themselves.
pub fn encoder_attention_mask(det_ids: &[Option<u64>]) -> Tensor {
    let d = det_ids.len();
    let mut mask = Tensor::zeros(&[d, d + 1]);
    for (i, a) in det_ids.iter().enumerate() {
        for (k, b) in det_ids.iter().enumerate() {
            if k == i || (a.is_some() && a == b) {
                mask.set(i, k, 1.0);
            }
        }
    }
    mask
}
