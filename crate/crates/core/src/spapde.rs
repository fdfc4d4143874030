//! Pose-conditioned appearance features.
//!
//! Keypoints are rendered as Gaussian heatmaps; a spatially adaptive pose
//! denormalisation (SPAPDE) layer normalises image features per channel over the
//! whole batch and re-scales/shifts them with `γ`, `β` maps predicted from the
//! heatmaps by 3×3 convolutions. A toy three-stage backbone interleaves SPAPDE
//! layers with convolutions and pools to an embedding.
//!
//! Statistics are always taken over the current invocation batch, so embedding a
//! detection depends on the other detections passed in the same call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{linear, register_linear};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::types::{BoundingBox, EngineConfig, Pose};

/// Channel widths of the toy backbone stages.
pub const BACKBONE_CHANNELS: [usize; 3] = [8, 16, 32];
/// Hidden width of the shared heatmap convolution in each SPAPDE layer.
pub const SPAPDE_HIDDEN: usize = 16;
/// Parameter namespace reserved for the backbone.
pub const BACKBONE_PREFIX: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSet {
    /// `K×H×W` grid with values in `[0, 1]`.
    pub grid: Tensor,
    pub kernel_width: f64,
}

/// Channel `k` holds `exp(−((x−x_k)²+(y−y_k)²)/(2σ²))` evaluated at integer pixel
/// positions; invisible keypoints give all-zero channels.
pub fn render_heatmaps(pose: &Pose, height: usize, width: usize, kernel_width: f64) -> HeatmapSet {
    let k = pose.len();
    let mut grid = Tensor::zeros(&[k, height, width]);
    let two_var = 2.0 * kernel_width * kernel_width;
    let data = grid.data_mut();
    for (c, kp) in pose.keypoints.iter().enumerate() {
        if !kp.is_visible() {
            continue;
        }
        let plane = &mut data[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
                plane[y * width + x] = (-d2 / two_var).exp();
            }
        }
    }
    HeatmapSet { grid, kernel_width }
}

/// Maps image coordinates into a `height×width` crop of `bbox`.
pub fn pose_to_crop(pose: &Pose, bbox: &BoundingBox, height: usize, width: usize) -> Pose {
    let sx = width as f64 / bbox.width();
    let sy = height as f64 / bbox.height();
    Pose::new(
        pose.keypoints
            .iter()
            .map(|k| crate::types::Keypoint {
                x: (k.x - bbox.x_min) * sx,
                y: (k.y - bbox.y_min) * sy,
                ..*k
            })
            .collect(),
    )
}

pub fn register_spapde<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    keypoints: usize,
    channels: usize,
    rng: &mut R,
) {
    let conv = |store: &mut ParamStore, name: String, cin: usize, cout: usize, rng: &mut R| {
        store.insert_uniform(format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng);
        store.insert_uniform(format!("{name}.b"), &[cout], cin * 9, rng);
    };
    conv(store, format!("{prefix}.shared"), keypoints, SPAPDE_HIDDEN, rng);
    conv(store, format!("{prefix}.gamma"), SPAPDE_HIDDEN, channels, rng);
    conv(store, format!("{prefix}.beta"), SPAPDE_HIDDEN, channels, rng);
    // γ starts around 1 so an untrained layer behaves like plain normalisation.
    store
        .get_mut(&format!("{prefix}.gamma.b"))
        .expect("registered")
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += 1.0);
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.conv3x3(x, w, b)
}

/// `a = ReLU(conv(h)); γ = conv(a); β = conv(a)` for heatmaps `h: N×K×H×W`.
pub fn spapde_modulation(tape: &mut Tape, store: &ParamStore, prefix: &str, heatmaps: Var) -> Result<(Var, Var)> {
    let a = conv(tape, store, &format!("{prefix}.shared"), heatmaps)?;
    let a = tape.relu(a);
    let gamma = conv(tape, store, &format!("{prefix}.gamma"), a)?;
    let beta = conv(tape, store, &format!("{prefix}.beta"), a)?;
    Ok((gamma, beta))
}

/// `γ ⊙ (f − μ_c)/σ_c + β`, with per-channel statistics over all persons and pixels.
pub fn spapde_forward(tape: &mut Tape, features: Var, gamma: Var, beta: Var) -> Result<Var> {
    if tape.shape(features) != tape.shape(gamma) || tape.shape(features) != tape.shape(beta) {
        return Err(Error::Shape {
            op: "spapde_forward",
            detail: format!(
                "features {:?}, gamma {:?}, beta {:?}",
                tape.shape(features),
                tape.shape(gamma),
                tape.shape(beta)
            ),
        });
    }
    let normed = tape.channel_norm(features)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

pub fn register_backbone<R: Rng>(store: &mut ParamStore, cfg: &EngineConfig, rng: &mut R) {
    let mut cin = 3;
    for (s, &c) in BACKBONE_CHANNELS.iter().enumerate() {
        let p = format!("{BACKBONE_PREFIX}.s{s}");
        store.insert_uniform(format!("{p}.conv.w"), &[c, cin, 3, 3], cin * 9, rng);
        store.insert_uniform(format!("{p}.conv.b"), &[c], cin * 9, rng);
        register_spapde(store, &format!("{p}.spapde"), cfg.num_keypoints, c, rng);
        cin = c;
    }
    register_linear(store, &format!("{BACKBONE_PREFIX}.head"), cin, cfg.embed_dim, true, rng);
}

/// Output of a backbone pass.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `N×d` embeddings.
    pub embeddings: Var,
    /// True when heatmaps were missing and plain normalisation was used.
    pub used_plain_norm: bool,
}

/// Toy backbone over crops `N×3×H×W` and optional heatmaps `N×K×H×W`.
pub fn backbone_forward(
    tape: &mut Tape,
    store: &ParamStore,
    crops: Var,
    heatmaps: Option<Var>,
) -> Result<BackboneOutput> {
    let mut x = crops;
    let mut hm = heatmaps;
    for s in 0..BACKBONE_CHANNELS.len() {
        let p = format!("{BACKBONE_PREFIX}.s{s}");
        x = conv(tape, store, &format!("{p}.conv"), x)?;
        x = match hm {
            Some(h) => {
                let (g, b) = spapde_modulation(tape, store, &format!("{p}.spapde"), h)?;
                spapde_forward(tape, x, g, b)?
            }
            None => tape.channel_norm(x)?,
        };
        x = tape.relu(x);
        x = tape.avg_pool2(x)?;
        if let Some(h) = hm {
            hm = Some(tape.avg_pool2(h)?);
        }
    }
    let pooled = tape.global_avg_pool(x)?;
    let embeddings = linear(tape, store, &format!("{BACKBONE_PREFIX}.head"), pooled)?;
    Ok(BackboneOutput {
        embeddings,
        used_plain_norm: heatmaps.is_none(),
    })
}

/// Stacks per-person `C×H×W` tensors into one `N×C×H×W` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape {
        op: "stack_images",
        detail: "no images".into(),
    })?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "stack_images",
                detail: format!("{:?} vs {shape:?}", im.shape()),
            });
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Embeds one crop. Returns the embedding and whether the plain-normalisation
/// fallback was used because no heatmaps were given.
pub fn appearance_embed(
    crop: &Tensor,
    heatmaps: Option<&HeatmapSet>,
    store: &ParamStore,
) -> Result<(Vec<f64>, bool)> {
    let mut tape = Tape::new();
    let c = tape.leaf(stack_images(&[crop])?);
    let h = match heatmaps {
        Some(h) => Some(tape.leaf(stack_images(&[&h.grid])?)),
        None => None,
    };
    let out = backbone_forward(&mut tape, store, c, h)?;
    if out.used_plain_norm {
        log::warn!("appearance_embed: no heatmaps, falling back to plain normalisation");
    }
    Ok((tape.value(out.embeddings).data().to_vec(), out.used_plain_norm))
}
