use dualsource::nn::gradcheck::random_tensor;
use dualsource::nn::{ParamStore, Tape, Tensor, LN_EPS};
use dualsource::transformer::{
    decoder_layer_forward, dual_source_attention, edge_embedding_head, encoder_forward, new_track_embedding_head,
    track_embedding_head, DecoderState, Model,
};
use dualsource::{EdgeUpdate, EngineConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(d: usize, heads: usize, alpha: f64) -> EngineConfig {
    EngineConfig {
        embed_dim: d,
        edge_dim: d,
        ffn_hidden: 2 * d,
        head_hidden: 2 * d,
        edge_hidden: d,
        heads,
        alpha,
        ..EngineConfig::small()
    }
}

fn zero(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

fn set(store: &mut ParamStore, name: &str, values: &[f64]) {
    let t = store.get_mut(name).unwrap();
    assert_eq!(t.len(), values.len(), "{name}");
    t.data_mut().copy_from_slice(values);
}

// Scalar re-implementations used as oracles.

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|o| w.row(o).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn affine(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut y = mat_vec(store.get(&format!("{prefix}.w")).unwrap(), x);
    if let Ok(b) = store.get(&format!("{prefix}.b")) {
        y.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
    }
    y
}

fn ln(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (store.get(&format!("{prefix}.g")).unwrap(), store.get(&format!("{prefix}.b")).unwrap());
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn ffn(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(store, &format!("{prefix}.l1"), x).into_iter().map(gelu).collect();
    affine(store, &format!("{prefix}.l2"), &h)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_frame(cfg: &EngineConfig, t: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e_t = random_tensor(&[t, cfg.embed_dim], &mut rng);
    let e_d = random_tensor(&[d, cfg.embed_dim], &mut rng);
    let raw = random_tensor(&[t * d, 4], &mut rng).map(|v| 0.5 * (v + 1.0));
    (e_t, e_d, raw)
}

#[test]
fn alpha_endpoints_select_one_source_exactly() {
    for heads in [1, 2] {
        for (alpha, seed) in [(1.0, 0), (0.0, 1)] {
            let model = Model::init(cfg(6, heads, alpha), seed).unwrap();
            let (e_t, e_d, raw) = random_frame(&model.config, 3, 4, seed);
            let out = model.forward(&e_t, &e_d, &raw).unwrap();
            for b in &out.bundles {
                let want = if alpha == 1.0 { &b.s_a } else { &b.s_e };
                assert_eq!(&b.a, want);
            }
        }
    }
}

#[test]
fn no_detections_gives_all_null_attention_and_zero_update() {
    let c = cfg(4, 1, 0.3);
    let model = Model::init(c.clone(), 3).unwrap();
    let mut tape = Tape::new();
    let e_t = tape.leaf(random_tensor(&[2, 4], &mut ChaCha8Rng::seed_from_u64(0)));
    let e_d = tape.leaf(Tensor::zeros(&[0, 4]));
    let edge = tape.leaf(Tensor::zeros(&[0, 4]));
    let (delta, b) = dual_source_attention(&mut tape, &model.params, &c, 0, e_t, e_d, edge).unwrap();
    assert_eq!(tape.value(b.a), &Tensor::full(&[2, 1], 1.0));
    assert_eq!(tape.value(delta), &Tensor::zeros(&[2, 4]));
}

#[test]
fn one_track_two_detections_hand_chain() {
    let alpha = 0.25;
    let c = cfg(2, 1, alpha);
    let mut model = Model::init(c.clone(), 0).unwrap();
    let p = &mut model.params;
    set(p, "dec.0.h0.wq.w", &[1.0, 2.0, 0.0, 1.0]);
    set(p, "dec.0.h0.wk.w", &[0.5, 0.0, -1.0, 1.0]);
    set(p, "dec.0.h0.we.w", &[2.0, -1.0]);
    set(p, "dec.0.h0.wa.w", &[1.0, 1.0, 0.0, 3.0]);

    let e_t = [0.3, -0.7];
    let e_d = [[1.0, 0.5], [-0.4, 0.8]];
    let edge = [[0.9, 0.1], [0.2, 0.6]];

    // q = Wq e_t = (0.3 − 1.4, −0.7) = (−1.1, −0.7)
    // k0 = Wk e_d0 = (0.5, −0.5), k1 = (−0.2, 1.2)
    let o_a = [(-1.1 * 0.5 + -0.7 * -0.5) / 2f64.sqrt(), (-1.1 * -0.2 + -0.7 * 1.2) / 2f64.sqrt()];
    let o_e = [2.0 * 0.9 - 0.1, 2.0 * 0.2 - 0.6];
    let softmax = |l: [f64; 2]| {
        let z = l[0].exp() + l[1].exp() + 1.0;
        [l[0].exp() / z, l[1].exp() / z, 1.0 / z]
    };
    let (s_a, s_e) = (softmax(o_a), softmax(o_e));
    let a: Vec<f64> = (0..3).map(|i| alpha * s_a[i] + (1.0 - alpha) * s_e[i]).collect();
    let agg = [a[0] * e_d[0][0] + a[1] * e_d[1][0], a[0] * e_d[0][1] + a[1] * e_d[1][1]];
    let delta = [agg[0] + agg[1], 3.0 * agg[1]];

    let mut tape = Tape::new();
    let vt = tape.leaf(Tensor::matrix(1, 2, e_t.to_vec()).unwrap());
    let vd = tape.leaf(Tensor::from_rows(&e_d.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 2).unwrap());
    let ve = tape.leaf(Tensor::from_rows(&edge.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 2).unwrap());
    let (dv, b) = dual_source_attention(&mut tape, &model.params, &c, 0, vt, vd, ve).unwrap();
    assert!(close(tape.value(b.o_a).data(), &o_a, 1e-12));
    assert!(close(tape.value(b.o_e).data(), &o_e, 1e-12));
    assert!(close(tape.value(b.a).data(), &a, 1e-12));
    assert!(close(tape.value(dv).data(), &delta, 1e-12));
}

#[test]
fn one_hot_attention_with_identity_projection_copies_detection() {
    let c = cfg(3, 1, 0.0);
    let mut model = Model::init(c.clone(), 5).unwrap();
    let mut we = vec![0.0; 3];
    we[0] = 1.0;
    set(&mut model.params, "dec.0.h0.we.w", &we);
    set(&mut model.params, "dec.0.h0.wa.w", Tensor::identity(3).data());
    let e_d = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 7.0], vec![0.1, 0.2, 0.3]], 3).unwrap();
    // track j attends to detection (j + 1) mod 3 through a dominant edge logit
    let mut edge = Vec::new();
    for j in 0..2 {
        for i in 0..3 {
            let v = if i == (j + 1) % 3 { 1000.0 } else { -1000.0 };
            edge.push(vec![v, 0.0, 0.0]);
        }
    }
    let mut tape = Tape::new();
    let vt = tape.leaf(Tensor::zeros(&[2, 3]));
    let vd = tape.leaf(e_d.clone());
    let ve = tape.leaf(Tensor::from_rows(&edge, 3).unwrap());
    let (dv, _) = dual_source_attention(&mut tape, &model.params, &c, 0, vt, vd, ve).unwrap();
    for j in 0..2 {
        assert_eq!(tape.value(dv).row(j), e_d.row((j + 1) % 3));
    }
}

fn run_encoder(model: &Model, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = encoder_forward(&mut tape, &model.params, &model.config, v).unwrap();
    (
        tape.value(out.embeddings).clone(),
        out.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    )
}

#[test]
fn encoder_is_permutation_equivariant_and_handles_empty_input() {
    let model = Model::init(cfg(8, 1, 0.3), 2).unwrap();
    let x = random_tensor(&[5, 8], &mut ChaCha8Rng::seed_from_u64(9));
    let perm = [3, 0, 4, 1, 2];
    let px = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>(), 8).unwrap();
    let (y, _) = run_encoder(&model, &x);
    let (py, _) = run_encoder(&model, &px);
    for (r, &p) in perm.iter().enumerate() {
        assert!(close(py.row(r), y.row(p), 1e-12));
    }
    let (empty, att) = run_encoder(&model, &Tensor::zeros(&[0, 8]));
    assert_eq!(empty.shape(), &[0, 8]);
    assert!(att.iter().all(|a| a.rows() == 0));
}

#[test]
fn single_detection_encoder_matches_scalar_recomputation() {
    let mut c = cfg(6, 1, 0.3);
    c.encoder_stages = 1;
    let mut model = Model::init(c, 4).unwrap();
    // non-trivial layer-norm affine terms
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ["enc.0.ln1.g", "enc.0.ln1.b", "enc.0.ln2.g", "enc.0.ln2.b"] {
        let t = random_tensor(&[6], &mut rng);
        set(&mut model.params, name, t.data());
    }
    let x = random_tensor(&[1, 6], &mut rng);
    let (y, att) = run_encoder(&model, &x);

    let p = &model.params;
    let xv = x.row(0);
    let q = affine(p, "enc.0.wq", xv);
    let k = affine(p, "enc.0.wk", xv);
    let v = affine(p, "enc.0.wv", xv);
    let logit = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 6f64.sqrt();
    let w_self = logit.exp() / (logit.exp() + 1.0);
    let mixed: Vec<f64> = v.iter().map(|vi| w_self * vi).collect();
    let out = affine(p, "enc.0.wo", &mixed);
    let x1 = ln(p, "enc.0.ln1", &add(xv, &out));
    let want = ln(p, "enc.0.ln2", &add(&x1, &ffn(p, "enc.0.ffn", &x1)));

    assert!(close(att[0].data(), &[w_self, 1.0 - w_self], 1e-12));
    assert!(close(y.data(), &want, 1e-10));
}

fn decoder_step(model: &Model, e_t: &Tensor, e_d: &Tensor, edge: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let state = DecoderState {
        e_t: tape.leaf(e_t.clone()),
        edge: tape.leaf(edge.clone()),
        bundles: Vec::new(),
    };
    let vd = tape.leaf(e_d.clone());
    let s = decoder_layer_forward(&mut tape, &model.params, &model.config, 0, state, vd).unwrap();
    assert_eq!(s.bundles.len(), 1);
    (tape.value(s.e_t).clone(), tape.value(s.edge).clone())
}

#[test]
fn decoder_with_inert_update_and_ffn_double_normalises() {
    let mut model = Model::init(cfg(5, 1, 0.3), 8).unwrap();
    zero(&mut model.params, "dec.0.h0.wa");
    zero(&mut model.params, "dec.0.ffn.");
    let (e_t, e_d, _) = random_frame(&model.config, 3, 2, 4);
    let edge = random_tensor(&[6, 5], &mut ChaCha8Rng::seed_from_u64(3));
    let (out, _) = decoder_step(&model, &e_t, &e_d, &edge);
    for j in 0..3 {
        let want = ln(&model.params, "dec.0.ln2", &ln(&model.params, "dec.0.ln1", e_t.row(j)));
        assert!(close(out.row(j), &want, 1e-12));
    }
}

#[test]
fn equal_logit_pairs_get_equal_edge_embeddings() {
    for update in [EdgeUpdate::GatedLogits, EdgeUpdate::GatedWeights] {
        let mut c = cfg(4, 1, 0.4);
        c.edge_update = update;
        let model = Model::init(c, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e_t = random_tensor(&[2, 4], &mut rng);
        let row = random_tensor(&[1, 4], &mut rng);
        // detections 0 and 1 are identical, and so are their edges from track 0
        let e_d = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec(), vec![0.3, -0.1, 0.9, 0.2]], 4).unwrap();
        let mut edge = random_tensor(&[6, 4], &mut rng);
        let first = edge.row(0).to_vec();
        edge.data_mut()[4..8].copy_from_slice(&first);
        let (_, new_edge) = decoder_step(&model, &e_t, &e_d, &edge);
        assert_eq!(new_edge.row(0), new_edge.row(1));
        assert_ne!(new_edge.row(0), new_edge.row(2));
    }
}

#[test]
fn edge_head_is_pairwise_and_zero_weights_give_zero() {
    let mut model = Model::init(cfg(4, 1, 0.3), 1).unwrap();
    let raw = Tensor::from_rows(&[vec![0.2, 0.5, 0.1, 0.9], vec![0.7, 0.7, 0.7, 0.7], vec![0.2, 0.5, 0.1, 0.9]], 4).unwrap();
    let head = |m: &Model| {
        let mut tape = Tape::new();
        let v = tape.leaf(raw.clone());
        let e = edge_embedding_head(&mut tape, &m.params, v).unwrap();
        tape.value(e).clone()
    };
    let e = head(&model);
    assert_eq!(e.row(0), e.row(2));
    assert_ne!(e.row(0), e.row(1));
    zero(&mut model.params, "edge_head.");
    assert!(head(&model).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_heads_have_independent_parameters() {
    for seed in 0..5 {
        let mut model = Model::init(cfg(6, 1, 0.3), seed).unwrap();
        let x = random_tensor(&[2, 6], &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let a = track_embedding_head(&mut tape, &m.params, v).unwrap();
            let b = new_track_embedding_head(&mut tape, &m.params, v).unwrap();
            (tape.value(a).clone(), tape.value(b).clone())
        };
        let (a, b) = run(&model);
        assert_ne!(a, b);
        zero(&mut model.params, "track_head.");
        zero(&mut model.params, "new_track_head.");
        let (a, b) = run(&model);
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }
}

#[test]
fn raising_one_pair_oks_raises_only_that_edge_logit() {
    let model = Model::reference(EngineConfig::small()).unwrap();
    let (e_t, e_d, mut raw) = random_frame(&model.config, 2, 3, 7);
    let pair = 4; // track 1, detection 1
    let base = model.forward(&e_t, &e_d, &raw).unwrap().bundles[0].o_e.clone();
    for feature in 1..4 {
        let v = raw.at(pair, feature);
        raw.set(pair, feature, (v + 0.2).min(1.0) + 0.05);
        let now = model.forward(&e_t, &e_d, &raw).unwrap().bundles[0].o_e.clone();
        assert!(now.at(1, 1) > base.at(1, 1), "feature {feature}");
        for (k, (a, b)) in now.data().iter().zip(base.data()).enumerate() {
            if k != pair {
                assert_eq!(a, b);
            }
        }
        raw.set(pair, feature, v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn bundles_are_stochastic_and_exactly_gated(
        t in 0usize..4, d in 0usize..4, heads in 1usize..3, alpha in 0.0f64..=1.0, seed in 0u64..1000,
    ) {
        let model = Model::init(cfg(4, heads, alpha), seed).unwrap();
        let (e_t, e_d, raw) = random_frame(&model.config, t, d, seed);
        let out = model.forward(&e_t, &e_d, &raw).unwrap();
        prop_assert_eq!(out.bundles.len(), model.config.decoder_stages);
        for b in &out.bundles {
            prop_assert_eq!(b.a.shape(), &[t, d + 1]);
            for m in [&b.s_a, &b.s_e, &b.a] {
                for row in m.to_rows() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            for k in 0..b.a.len() {
                let want = alpha * b.s_a.data()[k] + (1.0 - alpha) * b.s_e.data()[k];
                prop_assert_eq!(b.a.data()[k], want);
            }
        }
        prop_assert!(out.track_embeddings.all_finite() && out.match_matrix.all_finite());
        prop_assert_eq!(out.match_matrix.shape(), &[d, t + 1]);
    }
}
