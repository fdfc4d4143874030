//! Temporal person similarities between tracks and detections: box IoU, the three
//! OKS variants, track warping and the raw edge-feature matrix.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Detection, EngineConfig, Pose, Track, WarpMode};

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Keypoint similarities `[shared, over p's keypoints, over q's keypoints]`.
///
/// Each keypoint contributes `exp(−d²/(2·s·κ²))` with `s` the area of `scale_box`.
/// Variant one averages over keypoints visible in both poses (0 if there are none);
/// the other two average over the keypoints visible in `p` (resp. `q`), where a
/// keypoint missing in the partner pose contributes 0.
pub fn oks_triplet(p: &Pose, q: &Pose, scale_box: &BoundingBox, kappas: &[f64]) -> [f64; 3] {
    debug_assert_eq!(p.len(), q.len());
    let s = scale_box.area().max(f64::EPSILON);
    let mut shared = (0.0, 0usize);
    let mut over_p = (0.0, 0usize);
    let mut over_q = (0.0, 0usize);
    for (i, (a, b)) in p.keypoints.iter().zip(&q.keypoints).enumerate() {
        let (va, vb) = (a.is_visible(), b.is_visible());
        let sim = if va && vb {
            let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
            let k = kappas.get(i).copied().unwrap_or(0.14);
            (-d2 / (2.0 * s * k * k)).exp()
        } else {
            0.0
        };
        if va && vb {
            shared.0 += sim;
            shared.1 += 1;
        }
        if va {
            over_p.0 += sim;
            over_p.1 += 1;
        }
        if vb {
            over_q.0 += sim;
            over_q.1 += 1;
        }
    }
    let mean = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
    [mean(shared), mean(over_p), mean(over_q)]
}

/// Carries a track's last pose and box into the current frame.
pub trait Warper: Send + Sync {
    fn warp(&self, pose: &Pose, bbox: &BoundingBox) -> (Pose, BoundingBox);
}

/// Named warpers available to [`WarpMode::Pluggable`].
#[derive(Clone, Default)]
pub struct WarpRegistry {
    warpers: HashMap<String, Arc<dyn Warper>>,
}

impl std::fmt::Debug for WarpRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<_> = self.warpers.keys().collect();
        names.sort();
        f.debug_struct("WarpRegistry").field("warpers", &names).finish()
    }
}

impl WarpRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, warper: Arc<dyn Warper>) {
        self.warpers.insert(name.into(), warper);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Warper>> {
        self.warpers.get(name)
    }
}

pub fn warp_track(track: &Track, mode: &WarpMode, registry: &WarpRegistry) -> Result<(Pose, BoundingBox)> {
    match mode {
        WarpMode::Identity => Ok((track.last_pose.clone(), track.last_box)),
        WarpMode::Pluggable(name) => {
            let w = registry
                .get(name)
                .ok_or_else(|| Error::UnregisteredWarper(name.clone()))?;
            Ok(w.warp(&track.last_pose, &track.last_box))
        }
    }
}

/// Raw `[IoU, OKS_shared, OKS_over_track, OKS_over_det]` per (track, detection) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatureMatrix {
    pub tracks: usize,
    pub detections: usize,
    /// Row-major `tracks × detections × 4`.
    pub raw: Vec<[f64; 4]>,
}

impl EdgeFeatureMatrix {
    pub fn get(&self, track: usize, det: usize) -> [f64; 4] {
        self.raw[track * self.detections + det]
    }

    /// Flattened `(T·D)×4` values, ready to become a tensor.
    pub fn flat(&self) -> Vec<f64> {
        self.raw.iter().flatten().copied().collect()
    }
}

pub fn edge_features(
    tracks: &[Track],
    dets: &[Detection],
    cfg: &EngineConfig,
    registry: &WarpRegistry,
) -> Result<EdgeFeatureMatrix> {
    let mut raw = Vec::with_capacity(tracks.len() * dets.len());
    for t in tracks {
        let (pose, bbox) = warp_track(t, &cfg.warp_mode, registry)?;
        for d in dets {
            let o = oks_triplet(&pose, &d.pose, &bbox, &cfg.oks_kappas);
            raw.push([iou(&bbox, &d.bbox), o[0], o[1], o[2]]);
        }
    }
    Ok(EdgeFeatureMatrix {
        tracks: tracks.len(),
        detections: dets.len(),
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Keypoint;

    fn pose(points: &[(f64, f64, bool)]) -> Pose {
        Pose::new(
            points
                .iter()
                .map(|&(x, y, v)| if v { Keypoint::visible_at(x, y) } else { Keypoint::missing() })
                .collect(),
        )
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let shifted = BoundingBox::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &shifted) - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn oks_identical_and_disjoint() {
        let p = pose(&[(0.0, 0.0, true), (5.0, 5.0, true), (9.0, 1.0, true)]);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(oks_triplet(&p, &p, &b, &[0.1; 3]), [1.0, 1.0, 1.0]);
        let a = pose(&[(0.0, 0.0, true), (0.0, 0.0, false), (0.0, 0.0, true)]);
        let c = pose(&[(0.0, 0.0, false), (1.0, 1.0, true), (0.0, 0.0, false)]);
        assert_eq!(oks_triplet(&a, &c, &b, &[0.1; 3]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn oks_against_per_keypoint_evaluation() {
        // p sees keypoints 0,1; q sees 1,2; only keypoint 1 is shared, at distance 3.
        let p = pose(&[(1.0, 1.0, true), (4.0, 4.0, true), (0.0, 0.0, false)]);
        let q = pose(&[(0.0, 0.0, false), (4.0, 7.0, true), (2.0, 2.0, true)]);
        let b = BoundingBox::new(0.0, 0.0, 20.0, 10.0);
        let kappas = [0.1, 0.2, 0.3];
        let k1 = (-9.0f64 / (2.0 * 200.0 * 0.04)).exp();
        let o = oks_triplet(&p, &q, &b, &kappas);
        assert!((o[0] - k1).abs() < 1e-12);
        assert!((o[1] - k1 / 2.0).abs() < 1e-12);
        assert!((o[2] - k1 / 2.0).abs() < 1e-12);
    }

    struct Offset(f64);
    impl Warper for Offset {
        fn warp(&self, pose: &Pose, bbox: &BoundingBox) -> (Pose, BoundingBox) {
            (pose.translated(self.0, 0.0), bbox.translated(self.0, 0.0))
        }
    }

    fn track() -> Track {
        Track {
            id: 1,
            embedding: vec![0.0; 2],
            last_pose: pose(&[(1.0, 2.0, true), (3.0, 4.0, true)]),
            last_box: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            frames_since_match: 0,
            active: true,
        }
    }

    #[test]
    fn warp_modes() {
        let t = track();
        let mut reg = WarpRegistry::new();
        let (p, b) = warp_track(&t, &WarpMode::Identity, &reg).unwrap();
        assert_eq!((p, b), (t.last_pose.clone(), t.last_box));

        let mode = WarpMode::Pluggable("shift".into());
        assert!(matches!(warp_track(&t, &mode, &reg), Err(Error::UnregisteredWarper(_))));
        reg.register("shift", Arc::new(Offset(5.0)));
        let (p, b) = warp_track(&t, &mode, &reg).unwrap();
        assert_eq!(p.keypoints[0].x, 6.0);
        assert_eq!(p.keypoints[1].x, 8.0);
        assert_eq!(b, BoundingBox::new(5.0, 0.0, 15.0, 10.0));
    }

    #[test]
    fn empty_track_list_gives_empty_matrix() {
        let cfg = EngineConfig::small().with_keypoints(2);
        let det = Detection::new(BoundingBox::new(0.0, 0.0, 1.0, 1.0), pose(&[(0.0, 0.0, true); 2]), 1.0);
        let m = edge_features(&[], &[det.clone(), det], &cfg, &WarpRegistry::new()).unwrap();
        assert_eq!((m.tracks, m.detections, m.raw.len()), (0, 2, 0));
    }

    #[test]
    fn self_similarity_is_all_ones() {
        let cfg = EngineConfig::small().with_keypoints(2);
        let t = track();
        let det = Detection::new(t.last_box, t.last_pose.clone(), 1.0);
        let m = edge_features(&[t], &[det], &cfg, &WarpRegistry::new()).unwrap();
        assert_eq!(m.get(0, 0), [1.0; 4]);
    }
}
