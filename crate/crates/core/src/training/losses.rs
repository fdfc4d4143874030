//! Tracking losses on attention and match matrices, and re-identification losses.

use crate::error::Result;
use crate::nn::{Tape, Tensor, Var};

/// Probabilities are clamped at this value before taking logs.
pub const LOSS_EPS: f64 = 1e-9;

fn zero(tape: &mut Tape) -> Var {
    tape.leaf(Tensor::scalar(0.0))
}

fn one_hot_rows(rows: usize, cols: usize, col_of: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        t.set(i, col_of(i), 1.0);
    }
    t
}

/// Cross-entropy of the `D×(T+1)` match matrix.
///
/// `targets[i]` is the track column of detection `i`, `None` for the null column.
/// With `literal`, unlabelled detections contribute `p_null` instead of
/// `ln p_null`, as the loss is sometimes typeset.
pub fn loss_match(tape: &mut Tape, m: Var, targets: &[Option<usize>], literal: bool) -> Result<Var> {
    let (d, cols) = (tape.shape(m)[0], tape.shape(m)[1]);
    if d == 0 {
        return Ok(zero(tape));
    }
    let null = cols - 1;
    let labelled: Vec<usize> = (0..d).filter(|&i| targets[i].is_some()).collect();
    let unlabelled: Vec<usize> = (0..d).filter(|&i| targets[i].is_none()).collect();
    let mut parts = Vec::new();
    if !labelled.is_empty() {
        let rows = tape.select_rows(m, &labelled)?;
        let mask = one_hot_rows(labelled.len(), cols, |k| targets[labelled[k]].expect("labelled"));
        let p = tape.masked_row_sum(rows, mask)?;
        let lp = tape.log_clamped(p, LOSS_EPS);
        parts.push(tape.sum(lp));
    }
    if !unlabelled.is_empty() {
        let rows = tape.select_rows(m, &unlabelled)?;
        let mask = one_hot_rows(unlabelled.len(), cols, |_| null);
        let p = tape.masked_row_sum(rows, mask)?;
        let term = if literal { p } else { tape.log_clamped(p, LOSS_EPS) };
        parts.push(tape.sum(term));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, -1.0 / d as f64))
}

/// Duplicate-aware attention loss `−mean_j ln(Σ_i A_ji mask_ji)` over the rows of a
/// row-stochastic attention matrix; see `decoder_attention_mask` and
/// `encoder_attention_mask` for the masks.
pub fn loss_attn(tape: &mut Tape, a: Var, mask: Tensor) -> Result<Var> {
    if tape.shape(a)[0] == 0 {
        return Ok(zero(tape));
    }
    let p = tape.masked_row_sum(a, mask)?;
    let lp = tape.log_clamped(p, LOSS_EPS);
    let m = tape.mean(lp);
    Ok(tape.scale(m, -1.0))
}

/// Unweighted sum of the match loss and every encoder and decoder attention loss.
pub fn total_loss(tape: &mut Tape, matching: Var, encoder: &[Var], decoder: &[Var]) -> Result<Var> {
    let mut acc = matching;
    for &l in encoder.iter().chain(decoder) {
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}

fn row_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.row_sum(sq)?;
    Ok(tape.sqrt_eps(s, 1e-12))
}

/// Mean over rows of `max(0, margin + ‖a − p‖ − ‖a − n‖)`.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let dp = row_distance(tape, anchor, pos)?;
    let dn = row_distance(tape, anchor, neg)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Mean squared distance of each embedding to its class center.
pub fn center_loss(tape: &mut Tape, embeds: Var, ids: &[usize], centers: Var) -> Result<Var> {
    let c = tape.select_rows(centers, ids)?;
    let diff = tape.sub(embeds, c)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.row_sum(sq)?;
    Ok(tape.mean(s))
}

/// Cross-entropy against `(1 − ε)·onehot + ε/C`, averaged over rows.
pub fn ce_label_smooth(tape: &mut Tape, logits: Var, ids: &[usize], eps: f64) -> Result<Var> {
    let (n, c) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let mut target = Tensor::full(&[n, c], eps / c as f64);
    for (i, &id) in ids.iter().enumerate() {
        target.set(i, id, 1.0 - eps + eps / c as f64);
    }
    let ls = tape.log_softmax_rows(logits)?;
    let per_row = tape.masked_row_sum(ls, target)?;
    let m = tape.mean(per_row);
    Ok(tape.scale(m, -1.0))
}
