use dualsource::geometry::oks_triplet;
use dualsource::io::results::write_loss_csv;
use dualsource::io::synth::{synth_sequence, Scenario, SynthOptions};
use dualsource::nn::gradcheck::{grad_check, random_tensor, ScalarFn};
use dualsource::nn::{Tape, Tensor};
use dualsource::training::labels::{decoder_attention_mask, OKS_FLOOR};
use dualsource::training::train::{label_frame, window_loss};
use dualsource::training::{
    ce_label_smooth, center_loss, greedy_identity_assignment, loss_attn, loss_match, total_loss, train_model,
    train_toy, triplet_loss, GtPerson, LossRecord, TrainOptions,
};
use dualsource::types::default_kappas;
use dualsource::{BoundingBox, EngineConfig, Keypoint, Model, Pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(tape: &Tape, v: dualsource::nn::Var) -> f64 {
    tape.value(v).data()[0]
}

fn person(rng: &mut ChaCha8Rng, k: usize, identity: u64) -> GtPerson {
    let (cx, cy) = (rng.random_range(100.0..300.0), rng.random_range(100.0..300.0));
    let pose = Pose::new(
        (0..k)
            .map(|_| Keypoint::visible_at(cx + rng.random_range(-20.0..20.0), cy + rng.random_range(-50.0..50.0)))
            .collect(),
    );
    GtPerson {
        pose,
        bbox: BoundingBox::new(cx - 25.0, cy - 60.0, cx + 25.0, cy + 60.0),
        identity,
    }
}

fn jittered(rng: &mut ChaCha8Rng, p: &Pose, spread: f64) -> Pose {
    Pose::new(
        p.keypoints
            .iter()
            .map(|kp| Keypoint::visible_at(kp.x + rng.random_range(-spread..spread), kp.y + rng.random_range(-spread..spread)))
            .collect(),
    )
}

/// Greedy result characterised without simulating greedy: among all maximal
/// injective labellings over above-floor pairs, the one whose scores sorted in
/// descending order are lexicographically largest (distinct scores assumed).
fn greedy_oracle(scores: &[Vec<f64>], ids: &[u64]) -> Vec<Option<u64>> {
    let (d, g) = (scores.len(), ids.len());
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let total = (g + 1).pow(d as u32);
    for code in 0..total {
        let mut c = code;
        let assign: Vec<Option<usize>> = (0..d)
            .map(|_| {
                let v = c % (g + 1);
                c /= g + 1;
                (v < g).then_some(v)
            })
            .collect();
        let used: Vec<usize> = assign.iter().flatten().copied().collect();
        let mut uniq = used.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != used.len() || assign.iter().enumerate().any(|(i, a)| a.is_some_and(|j| scores[i][j] <= OKS_FLOOR)) {
            continue;
        }
        let maximal = (0..d).all(|i| {
            assign[i].is_some() || (0..g).all(|j| used.contains(&j) || scores[i][j] <= OKS_FLOOR)
        });
        if !maximal {
            continue;
        }
        let mut key: Vec<f64> = assign.iter().enumerate().filter_map(|(i, a)| a.map(|j| scores[i][j])).collect();
        key.sort_by(|a, b| b.total_cmp(a));
        let better = match &best {
            None => true,
            Some((bk, _)) => key.iter().zip(bk).find(|(a, b)| a != b).map_or(key.len() > bk.len(), |(a, b)| a > b),
        };
        if better {
            best = Some((key, assign));
        }
    }
    best.map(|(_, a)| a.into_iter().map(|x| x.map(|j| ids[j])).collect()).unwrap_or_else(|| vec![None; d])
}

#[test]
fn greedy_labels_match_exhaustive_oracle() {
    let k = 6;
    let kappas = default_kappas(k);
    let mut checked_matches = 0;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = vec![person(&mut rng, k, 10), person(&mut rng, k, 20)];
        // three detections near random people, one possibly close to both
        let dets: Vec<Pose> = (0..3)
            .map(|_| {
                let src = rng.random_range(0..2);
                let spread = rng.random_range(1.0..25.0);
                jittered(&mut rng, &gt[src].pose, spread)
            })
            .collect();
        let scores: Vec<Vec<f64>> = dets
            .iter()
            .map(|p| gt.iter().map(|g| oks_triplet(p, &g.pose, &g.bbox, &kappas)[0]).collect())
            .collect();
        let got = greedy_identity_assignment(&dets, &gt, &kappas);
        assert_eq!(got, greedy_oracle(&scores, &[10, 20]), "seed {seed}: {scores:?}");
        checked_matches += got.iter().flatten().count();
    }
    assert!(checked_matches > 200);
}

#[test]
fn greedy_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt: Vec<GtPerson> = (0..3).map(|i| person(&mut rng, 5, i + 1)).collect();
    let kappas = default_kappas(5);
    let poses: Vec<Pose> = gt.iter().map(|g| g.pose.clone()).collect();
    assert_eq!(greedy_identity_assignment(&poses, &gt, &kappas), vec![Some(1), Some(2), Some(3)]);
    assert_eq!(greedy_identity_assignment(&poses[..1], &[], &kappas), vec![None]);
}

#[test]
fn match_loss_values_and_gradient() {
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::matrix(1, 3, vec![0.2, 0.3, 0.5]).unwrap());
    let l = loss_match(&mut tape, m, &[None], false).unwrap();
    assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-12);
    let perfect = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
    let l = loss_match(&mut tape, perfect, &[Some(1)], false).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let literal = loss_match(&mut tape, m, &[None], true).unwrap();
    assert!((scalar(&tape, literal) + 0.5).abs() < 1e-12);

    for seed in 0..5 {
        let logits = random_tensor(&[4, 3], &mut ChaCha8Rng::seed_from_u64(seed));
        let f: &ScalarFn = &|t, _, v| {
            let m = t.softmax_null(v[0])?;
            loss_match(t, m, &[Some(0), None, Some(2), Some(1)], false)
        };
        let r = grad_check(f, &[logits], &Default::default(), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}

#[test]
fn duplicate_probabilities_are_summed_inside_the_log() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(1, 4, vec![0.3, 0.4, 0.2, 0.1]).unwrap());
    let mask = decoder_attention_mask(&[7], &[Some(7), Some(7), Some(8)]);
    let l = loss_attn(&mut tape, a, mask).unwrap();
    assert!((scalar(&tape, l) + 0.7f64.ln()).abs() < 1e-9);

    let single = tape.leaf(Tensor::matrix(1, 2, vec![0.35, 0.65]).unwrap());
    let l = loss_attn(&mut tape, single, decoder_attention_mask(&[1], &[Some(1)])).unwrap();
    assert!((scalar(&tape, l) + 0.35f64.ln()).abs() < 1e-12);
    let alone = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let l = loss_attn(&mut tape, alone, decoder_attention_mask(&[1], &[Some(2)])).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
}

#[test]
fn total_and_reid_losses() {
    let mut tape = Tape::new();
    let mut leaf = |v: f64| tape.leaf(Tensor::scalar(v));
    let (m, e0, e1, d0, d1) = (leaf(1.0), leaf(0.5), leaf(0.5), leaf(0.25), leaf(0.25));
    let t = total_loss(&mut tape, m, &[e0, e1], &[d0, d1]).unwrap();
    assert_eq!(scalar(&tape, t), 2.5);

    let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
    let n = tape.leaf(Tensor::matrix(1, 2, vec![9.0, 9.0]).unwrap());
    let l = triplet_loss(&mut tape, a, a, n, 0.3).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    let centers = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]], 2).unwrap());
    let emb = tape.leaf(Tensor::from_rows(&[vec![-1.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.0]], 2).unwrap());
    let l = center_loss(&mut tape, emb, &[1, 0, 1], centers).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    for eps in [0.0, 0.1, 0.5] {
        let logits = tape.leaf(Tensor::full(&[2, 7], 1.3));
        let l = ce_label_smooth(&mut tape, logits, &[2, 5], eps).unwrap();
        assert!((scalar(&tape, l) - 7f64.ln()).abs() < 1e-12);
    }
}

fn crowd(seeds: &[u64], frames: usize) -> Vec<dualsource::io::SequenceFile> {
    let opts = SynthOptions::default();
    seeds.iter().map(|&s| synth_sequence(Scenario::Crowd, frames, s, &opts)).collect()
}

fn toy_config() -> EngineConfig {
    EngineConfig::small()
}

#[test]
fn gradient_reaches_every_decoder_stage() {
    let cfg = toy_config();
    let mut model = Model::init(cfg.clone(), 4).unwrap();
    let seq = &crowd(&[3], 3)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames: Vec<_> = seq.frames.iter().map(|f| label_frame(f, &cfg, 0.0, &mut rng)).collect();
    let mut tape = Tape::new();
    let l = window_loss(&mut tape, &model.params, &cfg, &frames, false).unwrap();
    let grads = tape.backward(l.total);
    model.params.zero_grad();
    tape.accumulate_param_grads(&grads, &mut model.params);
    for n in 0..cfg.decoder_stages {
        for h in 0..cfg.heads {
            let g = model.params.grad_of(&format!("dec.{n}.h{h}.we.w")).unwrap();
            assert!(g.max_abs() > 0.0, "stage {n} head {h}");
        }
    }
    assert!(model.params.grad_of("match.we.w").unwrap().max_abs() > 0.0);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let seqs = crowd(&[1], 6);
    let mut opts = TrainOptions {
        iterations: 4,
        ..TrainOptions::default()
    };
    opts.optimizer.lr = 0.0;
    let model = Model::init(toy_config(), 2).unwrap();
    let before = model.params.clone();
    let out = train_model(model, &seqs, &opts, 2).unwrap();
    for ((na, a), (nb, b)) in before.iter().zip(out.model.params.iter()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
}

#[test]
fn training_is_deterministic_and_makes_progress() {
    let seqs = crowd(&[100], 12);
    let opts = TrainOptions {
        iterations: 60,
        ..TrainOptions::default()
    };
    let a = train_toy(&seqs, &toy_config(), &opts, 7).unwrap();
    let b = train_toy(&seqs, &toy_config(), &opts, 7).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.final_loss, b.final_loss);
    assert!(a.final_loss < a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
}

#[test]
fn two_identity_training_reduces_loss_on_three_seeds() {
    let opts = SynthOptions::default();
    let seqs: Vec<_> = [5, 6].iter().map(|&s| synth_sequence(Scenario::Crossing, 12, s, &opts)).collect();
    for seed in 0..3 {
        let out = train_toy(&seqs, &toy_config(), &TrainOptions::default(), seed).unwrap();
        assert!(out.final_loss < out.initial_loss, "seed {seed}");
        assert_eq!(out.curve.len(), 200);
    }
}

#[test]
fn loss_curve_csv_has_one_row_per_iteration() {
    let rec = |i: usize| LossRecord {
        iteration: i,
        matching: 0.5,
        encoder: vec![0.1, 0.2],
        decoder: vec![0.3, 0.4],
        total: 1.5,
    };
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &[rec(0), rec(1)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,match,enc_0,enc_1,dec_0,dec_1,total");
    assert_eq!(lines[2], "1,0.5,0.1,0.2,0.3,0.4,1.5");
    assert_eq!(lines.len(), 3);
}

fn stochastic_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let raw = random_tensor(&[rows, cols], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| (2.0 * v).exp());
    let data: Vec<Vec<f64>> = raw
        .to_rows()
        .into_iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&data, cols).unwrap()
}

proptest! {
    #[test]
    fn attention_loss_is_non_negative(t in 1usize..4, d in 0usize..4, seed in 0u64..10_000, ids in prop::collection::vec(prop::option::of(0u64..4), 4)) {
        let a = stochastic_rows(t, d + 1, seed);
        let track_ids: Vec<u64> = (0..t as u64).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let l = loss_attn(&mut tape, av, decoder_attention_mask(&track_ids, &ids[..d])).unwrap();
        prop_assert!(scalar(&tape, l) >= 0.0);
    }

    #[test]
    fn moving_mass_to_the_label_lowers_match_loss(seed in 0u64..10_000, frac in 0.01f64..1.0) {
        let mut m = stochastic_rows(2, 4, seed);
        let targets = [Some(1), None];
        let loss = |m: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(m.clone());
            let l = loss_match(&mut tape, v, &targets, false).unwrap();
            scalar(&tape, l)
        };
        let before = loss(&m);
        // row 0: move mass from wrong column 0 to labelled column 1
        let moved = frac * m.at(0, 0);
        m.set(0, 0, m.at(0, 0) - moved);
        m.set(0, 1, m.at(0, 1) + moved);
        prop_assert!(loss(&m) < before);
    }

    #[test]
    fn ground_truth_identity_labels_at_most_one_original_detection(seed in 0u64..5_000) {
        let opts = SynthOptions { duplicate_prob: 0.5, ..SynthOptions::default() };
        let seq = synth_sequence(Scenario::Duplicates, 4, seed, &opts);
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in &seq.frames {
            let lf = label_frame(f, &cfg, 0.5, &mut rng);
            let mut ids: Vec<u64> = lf.labels.iter().zip(&lf.duplicate).filter(|(_, &d)| !d).filter_map(|(l, _)| *l).collect();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            // duplicates only repeat an identity that an original carries
            for (l, &dup) in lf.labels.iter().zip(&lf.duplicate) {
                if dup {
                    if let Some(id) = l {
                        prop_assert!(ids.contains(id));
                    }
                }
            }
        }
    }
}
