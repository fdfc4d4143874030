//! Hand-constructed weights.
//!
//! The construction makes every block do one interpretable thing:
//!
//! * the encoder and the decoder FFNs are inert, so embeddings are layer-normed
//!   appearance vectors;
//! * appearance logits are `APPEARANCE_SCALE × correlation` of the two embeddings;
//! * the edge head maps a pair to `[u(g), 1, 0, …]` with `u` increasing in
//!   `g = IoU + ΣOKS`, and the first-stage edge logit is positive exactly when
//!   `g > GEOMETRY_THRESHOLD`, reaching `−GEOMETRY_FLOOR` at `g = 0`;
//! * each edge update stores the gated logit (shifted by `EDGE_SHIFT` so GELU acts
//!   as the identity) and the next stage reads it back, so the matching layer sees
//!   the alpha-gated mixture of all stages;
//! * both embedding heads rescale their input to norm `√d`, and the confidence
//!   update blends old and new embeddings half-and-half.

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::types::EngineConfig;

use super::{edge_embedding_head, register_params};

pub const APPEARANCE_SCALE: f64 = 20.0;
pub const GEOMETRY_THRESHOLD: f64 = 1.1;
pub const GEOMETRY_FLOOR: f64 = 8.0;
pub const EDGE_SHIFT: f64 = 30.0;

fn set(store: &mut ParamStore, name: &str, f: impl FnOnce(&mut Tensor)) -> Result<()> {
    f(store.get_mut(name)?);
    Ok(())
}

fn scaled_identity(t: &mut Tensor, c: f64) {
    let n = t.rows();
    for i in 0..n {
        t.set(i, i, c);
    }
}

/// Edge head output `u(g)` for a raw vector summing to `g`.
fn edge_score(store: &ParamStore, g: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let raw = tape.leaf(Tensor::matrix(1, 4, vec![g, 0.0, 0.0, 0.0])?);
    let e = edge_embedding_head(&mut tape, store, raw)?;
    Ok(tape.value(e).data()[0])
}

pub fn reference_params(cfg: &EngineConfig) -> Result<ParamStore> {
    let d = cfg.embed_dim;
    if cfg.head_hidden < 2 * d || cfg.edge_dim < 2 || cfg.edge_hidden < 2 {
        return Err(Error::Shape {
            op: "reference_params",
            detail: "needs head_hidden ≥ 2·embed_dim and edge dims ≥ 2".into(),
        });
    }
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    register_params(&mut store, cfg, &mut rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        let t = store.get_mut(n)?;
        let fill = if n.ends_with(".g") { 1.0 } else { 0.0 };
        t.data_mut().fill(fill);
    }

    // edge head: [g, 1, 0…] → LN → GELU → [x0, 1, 0…] → LN → GELU → [u, 1, 0…]
    set(&mut store, "edge_head.l1.w", |t| (0..4).for_each(|j| t.set(0, j, 1.0)))?;
    set(&mut store, "edge_head.l1.b", |t| t.data_mut()[1] = 1.0)?;
    for l in ["edge_head.l2", "edge_head.l3"] {
        set(&mut store, &format!("{l}.w"), |t| t.set(0, 0, 1.0))?;
        set(&mut store, &format!("{l}.b"), |t| t.data_mut()[1] = 1.0)?;
    }
    let u_star = edge_score(&store, GEOMETRY_THRESHOLD)?;
    let u_zero = edge_score(&store, 0.0)?;
    let k = GEOMETRY_FLOOR / (u_star - u_zero);

    let c = (APPEARANCE_SCALE / (d as f64).sqrt()).sqrt();
    for n in 0..cfg.decoder_stages {
        for h in 0..cfg.heads {
            set(&mut store, &format!("dec.{n}.h{h}.wq.w"), |t| scaled_identity(t, c))?;
            set(&mut store, &format!("dec.{n}.h{h}.wk.w"), |t| scaled_identity(t, c))?;
            set(&mut store, &format!("dec.{n}.h{h}.we.w"), |t| {
                if n == 0 {
                    t.set(0, 0, k);
                    t.set(0, 1, -k * u_star);
                } else {
                    t.set(0, 0, 1.0);
                    t.set(0, 1, -EDGE_SHIFT);
                }
            })?;
        }
        set(&mut store, &format!("dec.{n}.ffn_e.l1.w"), |t| t.set(0, 0, 1.0))?;
        set(&mut store, &format!("dec.{n}.ffn_e.l1.b"), |t| t.data_mut()[0] = EDGE_SHIFT)?;
        set(&mut store, &format!("dec.{n}.ffn_e.l2.w"), |t| t.set(0, 0, 1.0))?;
        set(&mut store, &format!("dec.{n}.ffn_e.l2.b"), |t| t.data_mut()[1] = 1.0)?;
    }
    set(&mut store, "match.wq.w", |t| scaled_identity(t, c))?;
    set(&mut store, "match.wk.w", |t| scaled_identity(t, c))?;
    set(&mut store, "match.we.w", |t| {
        t.set(0, 0, 1.0);
        t.set(0, 1, -EDGE_SHIFT);
    })?;

    // heads: [x, −x, 0…] → LN → GELU → difference of the halves recovers x
    let s = (2.0 * d as f64 / cfg.head_hidden as f64).sqrt();
    for head in ["track_head", "new_track_head"] {
        set(&mut store, &format!("{head}.l1.w"), |t| {
            for i in 0..d {
                t.set(i, i, 1.0);
                t.set(d + i, i, -1.0);
            }
        })?;
        set(&mut store, &format!("{head}.l2.w"), |t| {
            for i in 0..d {
                t.set(i, i, s);
                t.set(i, d + i, -s);
            }
        })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_score_is_increasing() {
        let cfg = EngineConfig::small();
        let store = reference_params(&cfg).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=40 {
            let u = edge_score(&store, i as f64 * 0.1).unwrap();
            assert!(u > prev, "u({}) = {u} not above {prev}", i as f64 * 0.1);
            prev = u;
        }
    }

    #[test]
    fn rejects_narrow_heads() {
        let cfg = EngineConfig {
            head_hidden: 8,
            ..EngineConfig::small()
        };
        assert!(reference_params(&cfg).is_err());
    }
}
