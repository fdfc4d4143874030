//! Toy-scale training on labelled sequences.
//!
//! Sequences are cut into short overlapping windows. The first frame of a window
//! initialises one track per labelled identity through the new-track head; every
//! later frame runs the full forward pass against those tracks and adds the match
//! loss and all attention losses. Between frames, track states follow the ground
//! truth (teacher forcing): tracks adopt the pose and box of the detection carrying
//! their identity and unseen identities start new tracks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{
    decoder_attention_mask, encoder_attention_mask, greedy_identity_assignment, match_targets, GtPerson,
};
use super::losses::{loss_attn, loss_match, total_loss};
use super::optim::{AdamWConfig, OptimState};
use crate::error::{Error, Result};
use crate::geometry::{edge_features, WarpRegistry};
use crate::io::sequence::{Frame, SequenceFile};
use crate::io::synth::jitter_duplicate;
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::transformer::{encoder_forward, forward_frame, new_track_embedding_head, Model};
use crate::types::{Detection, EngineConfig, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    /// Per-frame probability of injecting a jittered duplicate.
    pub duplicate_prob: f64,
    /// Use the linear null-column term in the match loss.
    pub literal_null_term: bool,
    pub window: usize,
    pub overlap: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            optimizer: AdamWConfig {
                lr: 3e-3,
                warmup_steps: 20,
                decay_every: Some(150),
                ..AdamWConfig::default()
            },
            duplicate_prob: 0.3,
            literal_null_term: false,
            window: 3,
            overlap: 1,
        }
    }
}

/// Loss components of one iteration, summed over the supervised frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub matching: f64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossRecord>,
    /// Mean total loss over every training window before the first update.
    pub initial_loss: f64,
    /// The same measurement after the last update.
    pub final_loss: f64,
}

/// Detections of one frame with their identity labels.
#[derive(Debug, Clone)]
pub struct LabelledFrame {
    pub dets: Vec<Detection>,
    pub labels: Vec<Option<u64>>,
    pub duplicate: Vec<bool>,
}

/// Labels a frame by greedy OKS matching against its ground-truth people and
/// optionally injects one jittered duplicate that inherits its source's label.
pub fn label_frame<R: Rng>(frame: &Frame, cfg: &EngineConfig, duplicate_prob: f64, rng: &mut R) -> LabelledFrame {
    let gt: Vec<GtPerson> = frame
        .detections
        .iter()
        .filter(|d| !d.duplicate)
        .filter_map(|d| {
            d.identity.map(|identity| GtPerson {
                pose: d.detection.pose.clone(),
                bbox: d.detection.bbox,
                identity,
            })
        })
        .collect();
    let poses: Vec<_> = frame.detections.iter().map(|d| d.detection.pose.clone()).collect();
    let mut labels = greedy_identity_assignment(&poses, &gt, &cfg.oks_kappas);
    for (l, d) in labels.iter_mut().zip(&frame.detections) {
        if d.duplicate {
            *l = d.identity;
        }
    }
    let mut dets = frame.plain_detections();
    let mut duplicate: Vec<bool> = frame.detections.iter().map(|d| d.duplicate).collect();
    if duplicate_prob > 0.0 && !frame.detections.is_empty() && rng.random::<f64>() < duplicate_prob {
        let src = rng.random_range(0..frame.detections.len());
        let dup = jitter_duplicate(&frame.detections[src], rng);
        dets.push(dup.detection);
        labels.push(labels[src]);
        duplicate.push(true);
    }
    LabelledFrame { dets, labels, duplicate }
}

/// `(sequence, first frame)` of every training window.
pub fn windows(seqs: &[SequenceFile], len: usize, overlap: usize) -> Vec<(usize, usize)> {
    let stride = len.saturating_sub(overlap).max(1);
    let mut out = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let mut start = 0;
        while start + len <= seq.frames.len() {
            out.push((s, start));
            start += stride;
        }
    }
    out
}

/// Scalar loss of one window and its components.
pub struct WindowLoss {
    pub total: Var,
    pub matching: f64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

fn appearance_matrix(dets: &[Detection], d: usize) -> Result<Tensor> {
    let rows = dets
        .iter()
        .enumerate()
        .map(|(index, det)| det.appearance.clone().ok_or(Error::MissingAppearance { index }))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows, d)
}

/// Preferred detection per identity: the first non-duplicate, else the first one.
fn representative(frame: &LabelledFrame, id: u64) -> Option<usize> {
    let mut fallback = None;
    for (i, l) in frame.labels.iter().enumerate() {
        if *l == Some(id) {
            if !frame.duplicate[i] {
                return Some(i);
            }
            fallback.get_or_insert(i);
        }
    }
    fallback
}

/// Identities in order of first appearance that are not in `known`.
fn unseen_identities(frame: &LabelledFrame, known: &[u64]) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for id in frame.labels.iter().flatten() {
        if !known.contains(id) && !out.contains(id) {
            out.push(*id);
        }
    }
    out
}

fn track_from(det: &Detection, id: u64) -> Track {
    Track {
        id,
        embedding: Vec::new(),
        last_pose: det.pose.clone(),
        last_box: det.bbox,
        frames_since_match: 0,
        active: true,
    }
}

/// Unrolls one window on `tape` and returns its loss.
pub fn window_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EngineConfig,
    frames: &[LabelledFrame],
    literal: bool,
) -> Result<WindowLoss> {
    let d = cfg.embed_dim;
    let registry = WarpRegistry::new();
    let first = &frames[0];
    let x0 = tape.leaf(appearance_matrix(&first.dets, d)?);
    let enc0 = encoder_forward(tape, store, cfg, x0)?;
    let ids = unseen_identities(first, &[]);
    let rows: Vec<usize> = ids.iter().map(|&id| representative(first, id).expect("labelled")).collect();
    let mut tracks: Vec<Track> = rows.iter().zip(&ids).map(|(&i, &id)| track_from(&first.dets[i], id)).collect();
    let mut track_ids = ids;
    let mut e_t = if rows.is_empty() {
        tape.leaf(Tensor::zeros(&[0, d]))
    } else {
        let sel = tape.select_rows(enc0.embeddings, &rows)?;
        new_track_embedding_head(tape, store, sel)?
    };

    let mut terms = Vec::new();
    let mut matching = 0.0;
    let mut encoder = vec![0.0; cfg.encoder_stages];
    let mut decoder = vec![0.0; cfg.decoder_stages];
    for frame in &frames[1..] {
        let x = tape.leaf(appearance_matrix(&frame.dets, d)?);
        let edges = edge_features(&tracks, &frame.dets, cfg, &registry)?;
        let raw = tape.leaf(Tensor::matrix(edges.tracks * edges.detections, 4, edges.flat())?);
        let g = forward_frame(tape, store, cfg, e_t, x, raw)?;

        let targets = match_targets(&frame.labels, &track_ids);
        let lm = loss_match(tape, g.matching.m, &targets, literal)?;
        matching += tape.value(lm).data()[0];
        let mut enc_terms = Vec::new();
        for (k, &a) in g.encoder.attention.iter().enumerate() {
            let l = loss_attn(tape, a, encoder_attention_mask(&frame.labels))?;
            encoder[k] += tape.value(l).data()[0];
            enc_terms.push(l);
        }
        let mut dec_terms = Vec::new();
        for (n, b) in g.decoder.bundles.iter().enumerate() {
            let l = loss_attn(tape, b.a, decoder_attention_mask(&track_ids, &frame.labels))?;
            decoder[n] += tape.value(l).data()[0];
            dec_terms.push(l);
        }
        terms.push(total_loss(tape, lm, &enc_terms, &dec_terms)?);

        // teacher-forced transition to the next frame
        e_t = g.e_t;
        for (track, &id) in tracks.iter_mut().zip(&track_ids) {
            match representative(frame, id) {
                Some(i) => {
                    track.last_pose = frame.dets[i].pose.clone();
                    track.last_box = frame.dets[i].bbox;
                    track.frames_since_match = 0;
                }
                None => track.frames_since_match += 1,
            }
        }
        let fresh = unseen_identities(frame, &track_ids);
        if !fresh.is_empty() {
            let rows: Vec<usize> = fresh.iter().map(|&id| representative(frame, id).expect("labelled")).collect();
            let sel = tape.select_rows(g.encoder.embeddings, &rows)?;
            let new_rows = new_track_embedding_head(tape, store, sel)?;
            e_t = tape.concat_rows(&[e_t, new_rows], d)?;
            for (&i, &id) in rows.iter().zip(&fresh) {
                tracks.push(track_from(&frame.dets[i], id));
            }
            track_ids.extend(fresh);
        }
    }
    let total = match terms.split_first() {
        Some((&head, rest)) => {
            let mut acc = head;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok(WindowLoss {
        total,
        matching,
        encoder,
        decoder,
    })
}

fn labelled_window<R: Rng>(
    seq: &SequenceFile,
    start: usize,
    len: usize,
    cfg: &EngineConfig,
    dup: f64,
    rng: &mut R,
) -> Vec<LabelledFrame> {
    seq.frames[start..start + len]
        .iter()
        .map(|f| label_frame(f, cfg, dup, rng))
        .collect()
}

/// Mean window loss over all windows with a fixed duplicate-injection stream.
pub fn dataset_loss(model: &Model, seqs: &[SequenceFile], opts: &TrainOptions, seed: u64) -> Result<f64> {
    let wins = windows(seqs, opts.window, opts.overlap);
    if wins.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut sum = 0.0;
    for &(s, start) in &wins {
        let frames = labelled_window(&seqs[s], start, opts.window, &model.config, opts.duplicate_prob, &mut rng);
        let mut tape = Tape::new();
        let l = window_loss(&mut tape, &model.params, &model.config, &frames, opts.literal_null_term)?;
        sum += tape.value(l.total).data()[0];
    }
    Ok(sum / wins.len() as f64)
}

/// Trains a freshly initialised model; deterministic under `seed`.
pub fn train_toy(seqs: &[SequenceFile], cfg: &EngineConfig, opts: &TrainOptions, seed: u64) -> Result<TrainOutcome> {
    let model = Model::init(cfg.clone(), seed)?;
    train_model(model, seqs, opts, seed)
}

/// Continues training `model`.
pub fn train_model(mut model: Model, seqs: &[SequenceFile], opts: &TrainOptions, seed: u64) -> Result<TrainOutcome> {
    let wins = windows(seqs, opts.window.max(2), opts.overlap);
    if wins.is_empty() {
        return Err(Error::Shape {
            op: "train_toy",
            detail: format!("no sequence has {} frames", opts.window),
        });
    }
    let initial_loss = dataset_loss(&model, seqs, opts, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut opt = OptimState::new(opts.optimizer.clone(), &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        if order.is_empty() {
            order = (0..wins.len()).collect();
            order.shuffle(&mut rng);
        }
        let (s, start) = wins[order.pop().expect("refilled")];
        let frames = labelled_window(&seqs[s], start, opts.window, &model.config, opts.duplicate_prob, &mut rng);
        let mut tape = Tape::new();
        let l = window_loss(&mut tape, &model.params, &model.config, &frames, opts.literal_null_term)?;
        let total = tape.value(l.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NanLoss { batch: it });
        }
        let grads = tape.backward(l.total);
        model.params.zero_grad();
        tape.accumulate_param_grads(&grads, &mut model.params);
        opt.update(&mut model.params);
        curve.push(LossRecord {
            iteration: it,
            matching: l.matching,
            encoder: l.encoder,
            decoder: l.decoder,
            total,
        });
    }
    let final_loss = dataset_loss(&model, seqs, opts, seed)?;
    Ok(TrainOutcome {
        model,
        curve,
        initial_loss,
        final_loss,
    })
}
