//! Helpers shared by several integration-test targets.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use dualsource::io::eval::{evaluate, EvalReport};
use dualsource::io::synth::{jitter_duplicate, synth_sequence, Scenario, SynthOptions};
use dualsource::io::{AnnotatedDetection, SequenceFile};
use dualsource::{BoundingBox, Detection, EngineConfig, FrameResult, Keypoint, Model, Pose, TrackId, Tracker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Minimum total cost over every injective pairing of the smaller side.
pub fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return 0.0;
    }
    type Lookup<'a> = Box<dyn Fn(usize, usize) -> f64 + 'a>;
    let (rows, cols, at): (usize, usize, Lookup) = if n <= m {
        (n, m, Box::new(|r, c| cost[r][c]))
    } else {
        (m, n, Box::new(|r, c| cost[c][r]))
    };
    fn go(r: usize, rows: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(r + 1, rows, used, acc + at(r, c), at, best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, rows, &mut vec![false; cols], 0.0, &*at, &mut best);
    best
}

pub fn random_cost(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect()
}

pub fn run_tracker(model: Model, seq: &SequenceFile) -> Vec<FrameResult> {
    let mut tracker = Tracker::new(model);
    seq.frames
        .iter()
        .map(|f| tracker.step(f.index, &f.plain_detections()).expect("step"))
        .collect()
}

/// Counts gathered while running a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: EvalReport,
    pub new_tracks: usize,
    pub removed_duplicates: usize,
    pub injected_duplicates: usize,
    /// Injected duplicates that were flagged as duplicates.
    pub caught_duplicates: usize,
    /// Frame/identity pairs for which more than one detection was kept.
    pub surviving_duplicates: usize,
}

pub fn scenario_config(opts: &SynthOptions, alpha: f64, tau_dup: f64) -> EngineConfig {
    let mut cfg = EngineConfig::small().with_keypoints(opts.num_keypoints);
    cfg.embed_dim = opts.embed_dim;
    cfg.alpha = alpha;
    cfg.tau_dup = tau_dup;
    cfg
}

pub fn run_scenario(model: Model, scenario: Scenario, frames: usize, seed: u64, opts: &SynthOptions) -> ScenarioRun {
    let seq = synth_sequence(scenario, frames, seed, opts);
    let results = run_tracker(model, &seq);
    let (mut caught, mut surviving) = (0, 0);
    for (f, r) in seq.frames.iter().zip(&results) {
        caught += r.duplicates.iter().filter(|&&i| f.detections[i].duplicate).count();
        let mut kept: HashMap<u64, usize> = HashMap::new();
        for (i, d) in f.detections.iter().enumerate() {
            if let (Some(id), false) = (d.identity, r.duplicates.contains(&i)) {
                *kept.entry(id).or_default() += 1;
            }
        }
        surviving += kept.values().filter(|&&n| n > 1).count();
    }
    ScenarioRun {
        report: evaluate(&results, &seq, &seq).expect("evaluate"),
        new_tracks: results.iter().map(|r| r.new_tracks.len()).sum(),
        removed_duplicates: results.iter().map(|r| r.duplicates.len()).sum(),
        injected_duplicates: seq.frames.iter().flat_map(|f| &f.detections).filter(|d| d.duplicate).count(),
        caught_duplicates: caught,
        surviving_duplicates: surviving,
    }
}

/// Violations found by [`lifecycle_fuzz`], by kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub frames: usize,
    pub detections: usize,
    pub matched: usize,
    pub duplicates: usize,
    pub closed: usize,
    pub partition: usize,
    pub id_reuse: usize,
    pub aging: usize,
    pub convexity: usize,
}

impl FuzzReport {
    pub fn violations(&self) -> usize {
        self.partition + self.id_reuse + self.aging + self.convexity
    }
}

struct Walker {
    id: u64,
    center: Vec<f64>,
    x: f64,
    y: f64,
}

fn spawn(rng: &mut ChaCha8Rng, id: u64, dim: usize) -> Walker {
    Walker {
        id,
        center: (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
        x: rng.random_range(50.0..590.0),
        y: rng.random_range(80.0..400.0),
    }
}

fn observe(rng: &mut ChaCha8Rng, w: &Walker, k: usize) -> AnnotatedDetection {
    let bbox = BoundingBox::new(w.x - 30.0, w.y - 75.0, w.x + 30.0, w.y + 75.0);
    let pose = Pose::new(
        (0..k)
            .map(|i| {
                let x = w.x - 25.0 + 50.0 * (i % 2) as f64 + rng.random_range(-2.0..2.0);
                let y = w.y - 70.0 + 140.0 * i as f64 / k as f64 + rng.random_range(-2.0..2.0);
                if rng.random_bool(0.1) {
                    Keypoint::missing()
                } else {
                    Keypoint::visible_at(x, y)
                }
            })
            .collect(),
    );
    let app = w.center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
    AnnotatedDetection {
        detection: Detection::new(bbox, pose, 0.9).with_appearance(app),
        identity: Some(w.id),
        duplicate: false,
    }
}

/// Randomised long run checking the per-frame lifecycle invariants.
///
/// People wander, vanish for random stretches, get replaced by newcomers and
/// occasionally produce jittered duplicate detections; some frames are empty.
pub fn lifecycle_fuzz(model: Model, frames: usize, seed: u64) -> FuzzReport {
    let cfg = model.config.clone();
    let (k, dim, tau_age) = (cfg.num_keypoints, cfg.embed_dim, cfg.tau_age);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_person = 0;
    let mut people: Vec<Walker> = (0..5)
        .map(|_| {
            next_person += 1;
            spawn(&mut rng, next_person, dim)
        })
        .collect();
    let mut tracker = Tracker::new(model);
    let mut report = FuzzReport {
        frames,
        ..FuzzReport::default()
    };
    let mut seen_ids: HashSet<TrackId> = HashSet::new();
    let mut misses: HashMap<TrackId, usize> = HashMap::new();

    for frame in 0..frames as u64 {
        for p in people.iter_mut() {
            p.x = (p.x + rng.random_range(-6.0..6.0)).clamp(40.0, 600.0);
            p.y = (p.y + rng.random_range(-3.0..3.0)).clamp(80.0, 400.0);
        }
        if rng.random_bool(0.02) {
            let slot = rng.random_range(0..people.len());
            next_person += 1;
            people[slot] = spawn(&mut rng, next_person, dim);
        }
        let mut dets = Vec::new();
        if !rng.random_bool(0.05) {
            for p in &people {
                if rng.random_bool(0.75) {
                    let d = observe(&mut rng, p, k);
                    if rng.random_bool(0.1) {
                        let dup = jitter_duplicate(&d, &mut rng);
                        dets.push(d);
                        dets.push(dup);
                    } else {
                        dets.push(d);
                    }
                }
            }
        }
        let dets: Vec<Detection> = dets.into_iter().map(|a| a.detection).collect();
        let old: HashMap<TrackId, Vec<f64>> = tracker.tracks().iter().map(|t| (t.id, t.embedding.clone())).collect();
        let order: Vec<TrackId> = tracker.tracks().iter().map(|t| t.id).collect();
        let (res, out) = tracker.step_detailed(frame, &dets).expect("step");
        report.detections += dets.len();
        report.matched += res.assignments.len();
        report.duplicates += res.duplicates.len();
        report.closed += res.closed_tracks.len();

        // every detection in exactly one outcome, every track matched at most once
        let mut count = vec![0usize; dets.len()];
        for i in res.assignments.iter().map(|a| a.detection).chain(res.duplicates.iter().copied()).chain(res.new_tracks.iter().map(|a| a.detection)) {
            if i < dets.len() {
                count[i] += 1;
            } else {
                report.partition += 1;
            }
        }
        report.partition += count.iter().filter(|&&c| c != 1).count();
        let matched: HashSet<TrackId> = res.assignments.iter().map(|a| a.track).collect();
        if matched.len() != res.assignments.len() || res.assignments.iter().any(|a| !old.contains_key(&a.track)) {
            report.partition += 1;
        }

        for a in &res.new_tracks {
            if !seen_ids.insert(a.track) {
                report.id_reuse += 1;
            }
        }

        // expected closures from our own miss counters
        let mut expect_closed = Vec::new();
        for id in &order {
            let m = misses.entry(*id).or_insert(0);
            if matched.contains(id) {
                *m = 0;
            } else {
                *m += 1;
                if *m > tau_age {
                    expect_closed.push(*id);
                }
            }
        }
        let mut got = res.closed_tracks.clone();
        got.sort_unstable();
        expect_closed.sort_unstable();
        if got != expect_closed {
            report.aging += 1;
        }
        for id in &got {
            misses.remove(id);
        }
        let alive: HashSet<TrackId> = tracker.tracks().iter().map(|t| t.id).collect();
        if got.iter().any(|id| alive.contains(id)) {
            report.aging += 1;
        }
        for t in tracker.tracks() {
            if let Some(&m) = misses.get(&t.id) {
                if m != t.frames_since_match {
                    report.aging += 1;
                }
            }
        }
        for a in &res.new_tracks {
            misses.insert(a.track, 0);
        }

        // blended embedding stays between the previous embedding and the head output
        for (j, id) in order.iter().enumerate() {
            let (prev, head, now) = (&old[id], out.head_embeddings.row(j), out.track_embeddings.row(j));
            for c in 0..prev.len() {
                let (lo, hi) = (prev[c].min(head[c]), prev[c].max(head[c]));
                let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                if now[c] < lo - slack || now[c] > hi + slack {
                    report.convexity += 1;
                }
            }
        }
    }
    report
}
