//! The dual-source attention transformer: encoder, edge embedding head, decoder
//! stages with alpha-gated attention, embedding heads, confidence-guided update and
//! the matching layer.
//!
//! Every op is written against a [`Tape`] so the same code serves inference,
//! training and gradient checks. Edge tensors are stored as `(T·D)×d_e` matrices
//! with row `j·D + i` holding the pair (track `j`, detection `i`).

mod reference;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::layers::{ffn, layer_norm, linear, register_ffn, register_layer_norm, register_linear};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::spapde::register_backbone;
use crate::types::{validate_config, EdgeUpdate, EngineConfig};

pub use reference::reference_params;

/// Number of raw edge features per pair.
pub const EDGE_FEATURES: usize = 4;

/// Learned weights together with the configuration they were built for.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EngineConfig,
    pub params: ParamStore,
}

impl Model {
    /// Random initialisation, deterministic under `seed`.
    pub fn init(config: EngineConfig, seed: u64) -> Result<Model> {
        let config = validate_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        register_params(&mut params, &config, &mut rng);
        Ok(Model { config, params })
    }

    /// Random initialisation that also includes the toy appearance backbone.
    pub fn init_with_backbone(config: EngineConfig, seed: u64) -> Result<Model> {
        let mut model = Model::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbac0_b0e5);
        register_backbone(&mut model.params, &model.config, &mut rng);
        Ok(model)
    }

    /// Hand-constructed weights that track by appearance and geometry without
    /// training. See [`reference_params`].
    pub fn reference(config: EngineConfig) -> Result<Model> {
        let config = validate_config(config)?;
        let params = reference_params(&config)?;
        Ok(Model { config, params })
    }

    pub fn has_backbone(&self) -> bool {
        self.params.contains("backbone.head.w")
    }

    /// Writes the weights; the configuration is stored as JSON metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let (params, meta) = load_checkpoint(path)?;
        let config: EngineConfig = serde_json::from_str(&meta)?;
        let config = validate_config(config)?;
        let model = Model { config, params };
        model.check_params()?;
        Ok(model)
    }

    /// Replaces the non-structural settings (alpha, thresholds, warping) while
    /// keeping the architecture the weights were built for.
    pub fn with_runtime_settings(mut self, cfg: &EngineConfig) -> Result<Model> {
        let same_arch = cfg.embed_dim == self.config.embed_dim
            && cfg.edge_dim == self.config.edge_dim
            && cfg.encoder_stages == self.config.encoder_stages
            && cfg.decoder_stages == self.config.decoder_stages
            && cfg.heads == self.config.heads;
        if !same_arch {
            return Err(Error::Checkpoint(
                "configuration architecture differs from the loaded weights".into(),
            ));
        }
        self.config = validate_config(cfg.clone())?;
        Ok(self)
    }

    /// Verifies that every parameter a forward pass needs is present with the right shape.
    pub fn check_params(&self) -> Result<()> {
        let mut expected = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_params(&mut expected, &self.config, &mut rng);
        for (name, t) in expected.iter() {
            let have = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn enc(k: usize, p: &str) -> String {
    format!("enc.{k}.{p}")
}

fn dec(n: usize, p: &str) -> String {
    format!("dec.{n}.{p}")
}

fn dec_head(n: usize, h: usize, p: &str) -> String {
    format!("dec.{n}.h{h}.{p}")
}

/// Registers all tracker parameters (not the backbone).
pub fn register_params<R: rand::Rng>(store: &mut ParamStore, cfg: &EngineConfig, rng: &mut R) {
    let (d, de, eh) = (cfg.embed_dim, cfg.edge_dim, cfg.edge_hidden);
    for k in 0..cfg.encoder_stages {
        for w in ["wq", "wk", "wv", "wo"] {
            register_linear(store, &enc(k, w), d, d, false, rng);
        }
        register_layer_norm(store, &enc(k, "ln1"), d);
        register_ffn(store, &enc(k, "ffn"), d, cfg.ffn_hidden, d, rng);
        register_layer_norm(store, &enc(k, "ln2"), d);
    }

    register_linear(store, "edge_head.l1", EDGE_FEATURES, eh, true, rng);
    register_layer_norm(store, "edge_head.ln1", eh);
    register_linear(store, "edge_head.l2", eh, eh, true, rng);
    register_layer_norm(store, "edge_head.ln2", eh);
    register_linear(store, "edge_head.l3", eh, de, true, rng);

    for n in 0..cfg.decoder_stages {
        for h in 0..cfg.heads {
            register_linear(store, &dec_head(n, h, "wq"), d, d, false, rng);
            register_linear(store, &dec_head(n, h, "wk"), d, d, false, rng);
            register_linear(store, &dec_head(n, h, "we"), de, 1, false, rng);
            register_linear(store, &dec_head(n, h, "wa"), d, d, false, rng);
        }
        register_layer_norm(store, &dec(n, "ln1"), d);
        register_ffn(store, &dec(n, "ffn"), d, cfg.ffn_hidden, d, rng);
        register_layer_norm(store, &dec(n, "ln2"), d);
        register_ffn(store, &dec(n, "ffn_e"), 1, eh, de, rng);
    }

    for head in ["track_head", "new_track_head"] {
        register_linear(store, &format!("{head}.l1"), d, cfg.head_hidden, true, rng);
        register_layer_norm(store, &format!("{head}.ln"), cfg.head_hidden);
        register_linear(store, &format!("{head}.l2"), cfg.head_hidden, d, true, rng);
    }

    register_linear(store, "conf", cfg.decoder_stages, 1, true, rng);

    register_linear(store, "match.wq", d, d, false, rng);
    register_linear(store, "match.wk", d, d, false, rng);
    register_linear(store, "match.we", de, 1, false, rng);
}

fn rows(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[0]
}

fn check_width(tape: &Tape, v: Var, width: usize, op: &'static str) -> Result<()> {
    match tape.shape(v) {
        [_, w] if *w == width => Ok(()),
        s => Err(Error::Shape {
            op,
            detail: format!("expected rows of width {width}, got {s:?}"),
        }),
    }
}

/// `α·a + (1−α)·b`.
fn gate(tape: &mut Tape, alpha: f64, a: Var, b: Var) -> Result<Var> {
    let a = tape.scale(a, alpha);
    let b = tape.scale(b, 1.0 - alpha);
    tape.add(a, b)
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    if parts.len() == 1 {
        Ok(acc)
    } else {
        Ok(tape.scale(acc, 1.0 / parts.len() as f64))
    }
}

/// Edge embedding head: `[linear → LN → GELU] ×2 → linear`, `(T·D)×4 → (T·D)×d_e`.
pub fn edge_embedding_head(tape: &mut Tape, store: &ParamStore, raw: Var) -> Result<Var> {
    check_width(tape, raw, EDGE_FEATURES, "edge_embedding_head")?;
    let mut x = raw;
    for (l, ln) in [("edge_head.l1", "edge_head.ln1"), ("edge_head.l2", "edge_head.ln2")] {
        x = linear(tape, store, l, x)?;
        x = layer_norm(tape, store, ln, x)?;
        x = tape.gelu(x);
    }
    linear(tape, store, "edge_head.l3", x)
}

pub struct EncoderOutput {
    /// `D×d` encoded detection embeddings.
    pub embeddings: Var,
    /// Per stage `D×(D+1)` self-attention with the null column last.
    pub attention: Vec<Var>,
}

/// Self-attention encoder without positional encoding.
pub fn encoder_forward(tape: &mut Tape, store: &ParamStore, cfg: &EngineConfig, x: Var) -> Result<EncoderOutput> {
    check_width(tape, x, cfg.embed_dim, "encoder_forward")?;
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    let mut x = x;
    let mut attention = Vec::with_capacity(cfg.encoder_stages);
    for k in 0..cfg.encoder_stages {
        let q = linear(tape, store, &enc(k, "wq"), x)?;
        let key = linear(tape, store, &enc(k, "wk"), x)?;
        let v = linear(tape, store, &enc(k, "wv"), x)?;
        let logits = tape.matmul_bt(q, key)?;
        let logits = tape.scale(logits, scale);
        let s = tape.softmax_null(logits)?;
        attention.push(s);
        let weights = tape.drop_last_col(s)?;
        let mixed = tape.matmul(weights, v)?;
        let out = linear(tape, store, &enc(k, "wo"), mixed)?;
        let r = tape.add(x, out)?;
        let x1 = layer_norm(tape, store, &enc(k, "ln1"), r)?;
        let f = ffn(tape, store, &enc(k, "ffn"), x1)?;
        let r = tape.add(x1, f)?;
        x = layer_norm(tape, store, &enc(k, "ln2"), r)?;
    }
    Ok(EncoderOutput { embeddings: x, attention })
}

/// Tape handles of one attention bundle.
#[derive(Debug, Clone, Copy)]
pub struct BundleVars {
    pub o_a: Var,
    pub o_e: Var,
    pub s_a: Var,
    pub s_e: Var,
    pub a: Var,
}

/// Materialised attention matrices of one decoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    /// `T×D` appearance logits.
    pub o_a: Tensor,
    /// `T×D` edge logits.
    pub o_e: Tensor,
    /// `T×(D+1)`, null column last.
    pub s_a: Tensor,
    pub s_e: Tensor,
    pub a: Tensor,
}

impl AttentionBundle {
    pub fn from_vars(tape: &Tape, b: &BundleVars) -> Self {
        Self {
            o_a: tape.value(b.o_a).clone(),
            o_e: tape.value(b.o_e).clone(),
            s_a: tape.value(b.s_a).clone(),
            s_e: tape.value(b.s_e).clone(),
            a: tape.value(b.a).clone(),
        }
    }
}

/// Scalar edge logit per pair, `(T·D)×d_e -> T×D`.
fn edge_logits(tape: &mut Tape, store: &ParamStore, we: &str, edge: Var, t: usize, d: usize) -> Result<Var> {
    let w = tape.param(store, we)?;
    let o = tape.linear(edge, w, None)?;
    tape.reshape(o, &[t, d])
}

/// One alpha-gated cross-attention between tracks and detections.
///
/// Returns the proposed track update `(A_{:, :-1} E_D) W_Aᵀ` and the bundle. With
/// several heads, each head runs independently and the logits, probabilities and
/// updates are averaged.
pub fn dual_source_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EngineConfig,
    stage: usize,
    e_t: Var,
    e_d: Var,
    edge: Var,
) -> Result<(Var, BundleVars)> {
    let (t, d) = (rows(tape, e_t), rows(tape, e_d));
    check_width(tape, edge, cfg.edge_dim, "dual_source_attention")?;
    if rows(tape, edge) != t * d {
        return Err(Error::Shape {
            op: "dual_source_attention",
            detail: format!("{} edge rows for {t} tracks × {d} detections", rows(tape, edge)),
        });
    }
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = linear(tape, store, &dec_head(stage, h, "wq"), e_t)?;
        let k = linear(tape, store, &dec_head(stage, h, "wk"), e_d)?;
        let o_a = tape.matmul_bt(q, k)?;
        let o_a = tape.scale(o_a, scale);
        let o_e = edge_logits(tape, store, &dec_head(stage, h, "we.w"), edge, t, d)?;
        let s_a = tape.softmax_null(o_a)?;
        let s_e = tape.softmax_null(o_e)?;
        let a = gate(tape, cfg.alpha, s_a, s_e)?;
        let weights = tape.drop_last_col(a)?;
        let agg = tape.matmul(weights, e_d)?;
        let delta = linear(tape, store, &dec_head(stage, h, "wa"), agg)?;
        heads.push((BundleVars { o_a, o_e, s_a, s_e, a }, delta));
    }
    if heads.len() == 1 {
        let (b, delta) = heads.remove(0);
        return Ok((delta, b));
    }
    let pick = |f: fn(&BundleVars) -> Var| heads.iter().map(|(b, _)| f(b)).collect::<Vec<_>>();
    let (o_a, o_e) = (pick(|b| b.o_a), pick(|b| b.o_e));
    let (s_a, s_e) = (pick(|b| b.s_a), pick(|b| b.s_e));
    let deltas: Vec<Var> = heads.iter().map(|(_, d)| *d).collect();
    let o_a = mean_of(tape, &o_a)?;
    let o_e = mean_of(tape, &o_e)?;
    let s_a = mean_of(tape, &s_a)?;
    let s_e = mean_of(tape, &s_e)?;
    let a = gate(tape, cfg.alpha, s_a, s_e)?;
    let delta = mean_of(tape, &deltas)?;
    Ok((delta, BundleVars { o_a, o_e, s_a, s_e, a }))
}

/// Track embeddings, edge embeddings and the bundles collected so far.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub e_t: Var,
    pub edge: Var,
    pub bundles: Vec<BundleVars>,
}

/// One decoder stage: attention, residual FFN with layer norms, and the edge update.
pub fn decoder_layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EngineConfig,
    stage: usize,
    mut state: DecoderState,
    e_d: Var,
) -> Result<DecoderState> {
    let (t, d) = (rows(tape, state.e_t), rows(tape, e_d));
    let (delta, bundle) = dual_source_attention(tape, store, cfg, stage, state.e_t, e_d, state.edge)?;
    let r = tape.add(state.e_t, delta)?;
    let tilde = layer_norm(tape, store, &dec(stage, "ln1"), r)?;
    let f = ffn(tape, store, &dec(stage, "ffn"), tilde)?;
    let r = tape.add(tilde, f)?;
    let e_t = layer_norm(tape, store, &dec(stage, "ln2"), r)?;

    let scalar = match cfg.edge_update {
        EdgeUpdate::GatedLogits => gate(tape, cfg.alpha, bundle.o_a, bundle.o_e)?,
        EdgeUpdate::GatedWeights => tape.drop_last_col(bundle.a)?,
    };
    let scalar = tape.reshape(scalar, &[t * d, 1])?;
    let edge = ffn(tape, store, &dec(stage, "ffn_e"), scalar)?;

    state.e_t = e_t;
    state.edge = edge;
    state.bundles.push(bundle);
    Ok(state)
}

fn embedding_head(tape: &mut Tape, store: &ParamStore, head: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{head}.l1"), x)?;
    let h = layer_norm(tape, store, &format!("{head}.ln"), h)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{head}.l2"), h)
}

/// `linear → LN → GELU → linear`, `T×d → T×d`.
pub fn track_embedding_head(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    embedding_head(tape, store, "track_head", x)
}

/// Same structure as the track head with its own parameters; initialises new tracks.
pub fn new_track_embedding_head(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    embedding_head(tape, store, "new_track_head", x)
}

/// Per-track blending weights `w_j = σ(Σ_n w_n·max_i A^n[j,i] + b)`, `T×1`.
pub fn confidence_weights(tape: &mut Tape, store: &ParamStore, fused: &[Var]) -> Result<Var> {
    let mut maxes = Vec::with_capacity(fused.len());
    for &a in fused {
        let no_null = tape.drop_last_col(a)?;
        maxes.push(tape.row_max(no_null)?);
    }
    let pooled = tape.concat_cols(&maxes)?;
    let z = linear(tape, store, "conf", pooled)?;
    Ok(tape.sigmoid(z))
}

/// `(1 − w_j)·old_j + w_j·new_j` per track, with `w` from [`confidence_weights`].
pub fn confidence_update(tape: &mut Tape, store: &ParamStore, fused: &[Var], old: Var, new: Var) -> Result<Var> {
    let w = confidence_weights(tape, store, fused)?;
    blend(tape, w, old, new)
}

pub(crate) fn blend(tape: &mut Tape, w: Var, old: Var, new: Var) -> Result<Var> {
    let neg = tape.scale(w, -1.0);
    let keep = tape.add_scalar(neg, 1.0);
    let a = tape.mul_col(old, keep)?;
    let b = tape.mul_col(new, w)?;
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy)]
pub struct MatchVars {
    /// `D×T` detection-major logits.
    pub o_a: Var,
    pub o_e: Var,
    /// `D×(T+1)` assignment probabilities, null column last.
    pub m: Var,
}

/// Matching layer with detections as queries and its own projections; no output
/// projection follows the gate.
pub fn matching_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EngineConfig,
    e_t: Var,
    e_d: Var,
    edge: Var,
) -> Result<MatchVars> {
    let (t, d) = (rows(tape, e_t), rows(tape, e_d));
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    let q = linear(tape, store, "match.wq", e_d)?;
    let k = linear(tape, store, "match.wk", e_t)?;
    let o_a = tape.matmul_bt(q, k)?;
    let o_a = tape.scale(o_a, scale);
    let o_e = edge_logits(tape, store, "match.we.w", edge, t, d)?;
    let o_e = tape.transpose(o_e)?;
    let s_a = tape.softmax_null(o_a)?;
    let s_e = tape.softmax_null(o_e)?;
    let m = gate(tape, cfg.alpha, s_a, s_e)?;
    Ok(MatchVars { o_a, o_e, m })
}

/// Everything one frame computes, as tape handles.
pub struct FrameGraph {
    pub encoder: EncoderOutput,
    pub decoder: DecoderState,
    /// Track head output `Ê_T`.
    pub head: Var,
    /// Confidence-updated track embeddings.
    pub e_t: Var,
    pub matching: MatchVars,
}

/// Full per-frame forward pass.
///
/// `e_t`: `T×d` track embeddings, `e_d0`: `D×d` detection appearance,
/// `raw`: `(T·D)×4` raw edge features.
pub fn forward_frame(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EngineConfig,
    e_t: Var,
    e_d0: Var,
    raw: Var,
) -> Result<FrameGraph> {
    check_width(tape, e_t, cfg.embed_dim, "forward_frame")?;
    let encoder = encoder_forward(tape, store, cfg, e_d0)?;
    let edge = edge_embedding_head(tape, store, raw)?;
    let mut state = DecoderState {
        e_t,
        edge,
        bundles: Vec::with_capacity(cfg.decoder_stages),
    };
    for n in 0..cfg.decoder_stages {
        state = decoder_layer_forward(tape, store, cfg, n, state, encoder.embeddings)?;
    }
    let head = track_embedding_head(tape, store, state.e_t)?;
    let fused: Vec<Var> = state.bundles.iter().map(|b| b.a).collect();
    let updated = confidence_update(tape, store, &fused, e_t, head)?;
    let matching = matching_layer(tape, store, cfg, updated, encoder.embeddings, state.edge)?;
    Ok(FrameGraph {
        encoder,
        decoder: state,
        head,
        e_t: updated,
        matching,
    })
}

/// Materialised per-frame outputs.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub encoded: Tensor,
    pub encoder_attention: Vec<Tensor>,
    pub bundles: Vec<AttentionBundle>,
    /// Track head output before the confidence-guided blend.
    pub head_embeddings: Tensor,
    /// Confidence-updated track embeddings.
    pub track_embeddings: Tensor,
    pub match_matrix: Tensor,
}

impl Model {
    /// Runs [`forward_frame`] on plain tensors.
    pub fn forward(&self, e_t: &Tensor, e_d0: &Tensor, raw: &Tensor) -> Result<FrameOutput> {
        let mut tape = Tape::new();
        let (t, d, r) = (tape.leaf(e_t.clone()), tape.leaf(e_d0.clone()), tape.leaf(raw.clone()));
        let g = forward_frame(&mut tape, &self.params, &self.config, t, d, r)?;
        Ok(FrameOutput {
            encoded: tape.value(g.encoder.embeddings).clone(),
            encoder_attention: g.encoder.attention.iter().map(|&a| tape.value(a).clone()).collect(),
            bundles: g.decoder.bundles.iter().map(|b| AttentionBundle::from_vars(&tape, b)).collect(),
            head_embeddings: tape.value(g.head).clone(),
            track_embeddings: tape.value(g.e_t).clone(),
            match_matrix: tape.value(g.matching.m).clone(),
        })
    }

    /// Embeds unmatched detections (`n×d`, already encoded) as new tracks.
    pub fn new_track_embeddings(&self, encoded: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(encoded.clone());
        let y = new_track_embedding_head(&mut tape, &self.params, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EngineConfig {
        EngineConfig::small()
    }

    fn zeroed(mut store: ParamStore, prefix: &str) -> ParamStore {
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn zero_edge_head_gives_zero_embeddings() {
        let model = Model::init(small(), 1).unwrap();
        let store = zeroed(model.params, "edge_head");
        let mut tape = Tape::new();
        let raw = tape.leaf(Tensor::full(&[6, 4], 0.5));
        let e = edge_embedding_head(&mut tape, &store, raw).unwrap();
        assert_eq!(tape.shape(e), [6, 16]);
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_passes_empty_input_through() {
        let model = Model::init(small(), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[0, 16]));
        let out = encoder_forward(&mut tape, &model.params, &model.config, x).unwrap();
        assert_eq!(tape.shape(out.embeddings), [0, 16]);
        assert_eq!(out.attention.len(), 2);
    }

    #[test]
    fn no_detections_puts_all_mass_on_null() {
        let model = Model::init(small(), 3).unwrap();
        let mut tape = Tape::new();
        let e_t = tape.leaf(crate::nn::gradcheck::random_tensor(&[3, 16], &mut ChaCha8Rng::seed_from_u64(0)));
        let e_d = tape.leaf(Tensor::zeros(&[0, 16]));
        let edge = tape.leaf(Tensor::zeros(&[0, 16]));
        let (delta, b) = dual_source_attention(&mut tape, &model.params, &model.config, 0, e_t, e_d, edge).unwrap();
        assert_eq!(tape.value(b.a), &Tensor::full(&[3, 1], 1.0));
        assert!(tape.value(delta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_heads_disagree() {
        let model = Model::init(small(), 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(crate::nn::gradcheck::random_tensor(&[2, 16], &mut ChaCha8Rng::seed_from_u64(9)));
        let a = track_embedding_head(&mut tape, &model.params, x).unwrap();
        let b = new_track_embedding_head(&mut tape, &model.params, x).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn missing_parameter_is_reported() {
        let mut model = Model::init(small(), 5).unwrap();
        model.params = zeroed(model.params, "");
        assert!(model.check_params().is_ok());
        let mut partial = ParamStore::new();
        partial.insert("enc.0.wq.w", Tensor::zeros(&[16, 16]));
        model.params = partial;
        assert!(matches!(model.check_params(), Err(Error::Checkpoint(_))));
    }
}
