//! Named-parameter layer helpers built on the tape.
//!
//! A layer registered under `prefix` owns `prefix.w` / `prefix.b` (linear),
//! `prefix.g` / `prefix.b` (layer norm) or `prefix.w1`.. (feed-forward).

use rand::Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub fn register_linear<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut R,
) {
    store.insert_uniform(format!("{prefix}.w"), &[d_out, d_in], d_in, rng);
    if bias {
        store.insert_uniform(format!("{prefix}.b"), &[d_out], d_in, rng);
    }
}

pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

pub fn register_ffn<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut R,
) {
    register_linear(store, &format!("{prefix}.l1"), d_in, hidden, true, rng);
    register_linear(store, &format!("{prefix}.l2"), hidden, d_out, true, rng);
}

/// `x Wᵀ + b`, with the bias used only if registered.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = if store.contains(&bname) {
        Some(tape.param(store, &bname)?)
    } else {
        None
    };
    tape.linear(x, w, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b)
}

/// linear → GELU → linear. Residual and normalisation are applied by callers.
pub fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.l1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{prefix}.l2"), h)
}
