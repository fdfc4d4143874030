//! Auxiliary re-identification objective: batch-hard triplet, center and
//! label-smoothed cross-entropy losses on embedding rows.

use rand::Rng;

use super::losses::{ce_label_smooth, center_loss, triplet_loss};
use crate::error::{Error, Result};
use crate::nn::layers::register_linear;
use crate::nn::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReidWeights {
    pub margin: f64,
    pub smoothing: f64,
    pub center: f64,
}

impl Default for ReidWeights {
    fn default() -> Self {
        Self {
            margin: 0.3,
            smoothing: 0.1,
            center: 5e-4,
        }
    }
}

/// Registers `reid.classifier` and `reid.centers` for `classes` identities.
pub fn register_reid_heads<R: Rng>(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut R) {
    register_linear(store, "reid.classifier", dim, classes, true, rng);
    store.insert("reid.centers", Tensor::zeros(&[classes, dim]));
}

/// Hardest positive and hardest negative row per anchor; anchors without either
/// are skipped.
pub fn batch_hard_triplets(embeds: &Tensor, ids: &[usize]) -> Vec<(usize, usize, usize)> {
    let rows = embeds.to_rows();
    let dist = |a: usize, b: usize| -> f64 {
        rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mut out = Vec::new();
    for a in 0..rows.len() {
        let mut pos: Option<(f64, usize)> = None;
        let mut neg: Option<(f64, usize)> = None;
        for b in 0..rows.len() {
            if b == a {
                continue;
            }
            let d = dist(a, b);
            if ids[b] == ids[a] {
                if pos.is_none_or(|(best, _)| d > best) {
                    pos = Some((d, b));
                }
            } else if neg.is_none_or(|(best, _)| d < best) {
                neg = Some((d, b));
            }
        }
        if let (Some((_, p)), Some((_, n))) = (pos, neg) {
            out.push((a, p, n));
        }
    }
    out
}

/// `triplet + center_weight·center + CE_smoothed` for embedding rows labelled by
/// class index.
pub fn reid_loss(tape: &mut Tape, store: &ParamStore, embeds: Var, ids: &[usize], w: &ReidWeights) -> Result<Var> {
    if tape.shape(embeds)[0] != ids.len() {
        return Err(Error::Shape {
            op: "reid_loss",
            detail: format!("{} rows, {} labels", tape.shape(embeds)[0], ids.len()),
        });
    }
    let triplets = batch_hard_triplets(tape.value(embeds), ids);
    let mut total = if triplets.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let a = tape.select_rows(embeds, &triplets.iter().map(|t| t.0).collect::<Vec<_>>())?;
        let p = tape.select_rows(embeds, &triplets.iter().map(|t| t.1).collect::<Vec<_>>())?;
        let n = tape.select_rows(embeds, &triplets.iter().map(|t| t.2).collect::<Vec<_>>())?;
        triplet_loss(tape, a, p, n, w.margin)?
    };
    let centers = tape.param(store, "reid.centers")?;
    let c = center_loss(tape, embeds, ids, centers)?;
    let c = tape.scale(c, w.center);
    total = tape.add(total, c)?;
    let logits = crate::nn::layers::linear(tape, store, "reid.classifier", embeds)?;
    let ce = ce_label_smooth(tape, logits, ids, w.smoothing)?;
    tape.add(total, ce)
}
