//! Seeded synthetic sequences with ground-truth identities and controlled
//! appearance vectors.
//!
//! Each identity owns an appearance center drawn from a standard normal; every
//! observation is `separation · center + noise` with unit-variance noise, so
//! `separation = 0` makes appearance uninformative.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sequence::{AnnotatedDetection, Frame, SequenceFile, SCHEMA_VERSION};
use crate::types::{BoundingBox, Detection, Keypoint, Pose};

pub const PERSON_WIDTH: f64 = 60.0;
pub const PERSON_HEIGHT: f64 = 150.0;

/// Relative keypoint layout inside a person box, skeleton order: nose, head
/// bottom, head top, shoulders, elbows, wrists, hips, knees, ankles (left first).
const TEMPLATE: [(f64, f64); 15] = [
    (0.50, 0.08),
    (0.50, 0.15),
    (0.50, 0.02),
    (0.30, 0.20),
    (0.70, 0.20),
    (0.20, 0.35),
    (0.80, 0.35),
    (0.15, 0.50),
    (0.85, 0.50),
    (0.38, 0.55),
    (0.62, 0.55),
    (0.36, 0.75),
    (0.64, 0.75),
    (0.35, 0.97),
    (0.65, 0.97),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Two people walk towards each other and swap positions.
    Crossing,
    /// Two people; one disappears for `gap` frames and comes back.
    Occlusion,
    /// Two people; some frames carry a jittered duplicate detection.
    Duplicates,
    /// Eight people with overlapping boxes.
    Crowd,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Crossing, Scenario::Occlusion, Scenario::Duplicates, Scenario::Crowd];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Crossing => "crossing",
            Scenario::Occlusion => "occlusion",
            Scenario::Duplicates => "duplicates",
            Scenario::Crowd => "crowd",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}` (expected crossing, occlusion, duplicates or crowd)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub embed_dim: usize,
    pub num_keypoints: usize,
    /// Scale of the per-identity appearance center relative to the observation noise.
    pub separation: f64,
    /// Absent frames in the occlusion scenario.
    pub gap: usize,
    /// First absent frame; defaults to a third of the sequence.
    pub occlusion_start: Option<usize>,
    /// Frame at which crossing people swap boxes; defaults to the middle.
    pub crossing_frame: Option<usize>,
    /// Walking speed in pixels per frame (crossing, occlusion, duplicates).
    pub speed: f64,
    /// Keypoint position noise std in pixels.
    pub keypoint_noise: f64,
    /// Probability that a keypoint is reported invisible.
    pub dropout: f64,
    /// Per-frame probability of a duplicate in the duplicates scenario.
    pub duplicate_prob: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            num_keypoints: 15,
            separation: 3.5,
            gap: 10,
            occlusion_start: None,
            crossing_frame: None,
            speed: 10.0,
            keypoint_noise: 1.5,
            dropout: 0.05,
            duplicate_prob: 0.3,
            image_width: 640,
            image_height: 480,
        }
    }
}

struct Generator<'a> {
    opts: &'a SynthOptions,
    rng: ChaCha8Rng,
    centers: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn appearance(&mut self, id: usize) -> Vec<f64> {
        let sep = self.opts.separation;
        (0..self.opts.embed_dim).map(|k| sep * self.centers[id][k] + self.normal()).collect()
    }

    fn pose(&mut self, bbox: &BoundingBox) -> Pose {
        let mut kps: Vec<Keypoint> = (0..self.opts.num_keypoints)
            .map(|k| {
                let (rx, ry) = TEMPLATE[k % TEMPLATE.len()];
                let x = bbox.x_min + rx * bbox.width() + self.opts.keypoint_noise * self.normal();
                let y = bbox.y_min + ry * bbox.height() + self.opts.keypoint_noise * self.normal();
                if self.rng.random::<f64>() < self.opts.dropout {
                    Keypoint::new(x, y, 0.01, false)
                } else {
                    Keypoint::new(x, y, self.rng.random_range(0.6..1.0), true)
                }
            })
            .collect();
        if kps.iter().all(|k| !k.is_visible()) {
            kps[0].visible = true;
            kps[0].confidence = 0.9;
        }
        Pose::new(kps)
    }

    fn person(&mut self, id: usize, cx: f64, cy: f64) -> AnnotatedDetection {
        let bbox = BoundingBox::new(
            cx - PERSON_WIDTH / 2.0,
            cy - PERSON_HEIGHT / 2.0,
            cx + PERSON_WIDTH / 2.0,
            cy + PERSON_HEIGHT / 2.0,
        );
        let pose = self.pose(&bbox);
        let appearance = self.appearance(id);
        let score = self.rng.random_range(0.85..1.0);
        AnnotatedDetection {
            detection: Detection::new(bbox, pose, score).with_appearance(appearance),
            identity: Some(id as u64 + 1),
            duplicate: false,
        }
    }
}

/// Jittered copy of a detection: scale within ±5 %, shift within ±3 px, nearly
/// identical appearance. Keeps the identity and sets the duplicate flag.
pub fn jitter_duplicate<R: Rng>(src: &AnnotatedDetection, rng: &mut R) -> AnnotatedDetection {
    let scale = 1.0 + rng.random_range(-0.05..0.05);
    let dx = rng.random_range(-3.0..3.0);
    let dy = rng.random_range(-3.0..3.0);
    let b = &src.detection.bbox;
    let (cx, cy) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
    let map = |x: f64, c: f64, d: f64| (x - c) * scale + c + d;
    let bbox = BoundingBox::new(
        map(b.x_min, cx, dx),
        map(b.y_min, cy, dy),
        map(b.x_max, cx, dx),
        map(b.y_max, cy, dy),
    );
    let pose = Pose::new(
        src.detection
            .pose
            .keypoints
            .iter()
            .map(|k| Keypoint {
                x: map(k.x, cx, dx),
                y: map(k.y, cy, dy),
                ..*k
            })
            .collect(),
    );
    let appearance = src.detection.appearance.as_ref().map(|a| {
        a.iter()
            .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    });
    let mut detection = Detection::new(bbox, pose, rng.random_range(0.5..0.8));
    detection.appearance = appearance;
    AnnotatedDetection {
        detection,
        identity: src.identity,
        duplicate: true,
    }
}

pub fn synth_sequence(scenario: Scenario, n_frames: usize, seed: u64, opts: &SynthOptions) -> SequenceFile {
    let people = match scenario {
        Scenario::Crowd => 8,
        _ => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..people)
        .map(|_| (0..opts.embed_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut g = Generator { opts, rng, centers };
    let (w, h) = (opts.image_width as f64, opts.image_height as f64);
    let v = opts.speed;

    // crowd: grid start with small constant velocities
    let crowd: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|i| {
            let (c, r) = ((i % 4) as f64, (i / 4) as f64);
            let vx = g.rng.random_range(-3.0..3.0);
            let vy = g.rng.random_range(-1.5..1.5);
            (w / 2.0 - 70.0 + 45.0 * c, h / 2.0 - 55.0 + 110.0 * r, vx, vy)
        })
        .collect();
    let t_c = opts.crossing_frame.unwrap_or(n_frames / 2).max(1) as f64;
    let occ_start = opts.occlusion_start.unwrap_or(n_frames / 3);
    let mut any_duplicate = false;

    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let t = f as f64;
        let mut dets = Vec::new();
        match scenario {
            Scenario::Crossing => {
                let p = w / 2.0;
                dets.push(g.person(0, p + v * (t - t_c + 1.0), h / 2.0));
                dets.push(g.person(1, p + v * (t_c - t), h / 2.0));
            }
            Scenario::Occlusion | Scenario::Duplicates => {
                let x = 100.0 + v * t;
                dets.push(g.person(0, x, h / 2.0 - 110.0));
                let hidden = scenario == Scenario::Occlusion && (occ_start..occ_start + opts.gap).contains(&f);
                if !hidden {
                    dets.push(g.person(1, x, h / 2.0 + 110.0));
                }
                let forced = scenario == Scenario::Duplicates && f + 1 == n_frames && !any_duplicate;
                if scenario == Scenario::Duplicates
                    && f > 0
                    && (forced || g.rng.random::<f64>() < opts.duplicate_prob)
                {
                    let src = g.rng.random_range(0..dets.len());
                    let dup = jitter_duplicate(&dets[src], &mut g.rng);
                    dets.push(dup);
                    any_duplicate = true;
                }
            }
            Scenario::Crowd => {
                for (i, &(x0, y0, vx, vy)) in crowd.iter().enumerate() {
                    dets.push(g.person(i, x0 + vx * t, y0 + vy * t));
                }
            }
        }
        dets.shuffle(&mut g.rng);
        frames.push(Frame {
            index: f as u64,
            image_width: opts.image_width,
            image_height: opts.image_height,
            detections: dets,
        });
    }
    SequenceFile {
        version: SCHEMA_VERSION,
        sequence_id: format!("{scenario}-{seed}"),
        fps: 25.0,
        num_keypoints: Some(opts.num_keypoints),
        frames,
    }
}
