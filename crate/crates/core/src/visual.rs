//! Visual branch: scene-conditioned cross-attention over face tokens at
//! several scene scales, gated fusion of the scales, a face/scene mixing
//! encoder, a deeper fusion stack over all visual cues, and the per-cue
//! classification heads.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Error;
use crate::nn::{self, EncoderBlockParams, LinearParams};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

/// Trainable parameters of the visual branch.
#[derive(Clone, Debug)]
pub struct VisualParams {
    /// Query/key/value projections of the scene-conditioned cross-attention.
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    /// Scalar gate head applied to `[scene; faces]` rows.
    pub gate: LinearParams,
    /// Single encoder block mixing attended faces with the scene tokens.
    pub mixer: EncoderBlockParams,
    /// Deeper encoder stack fusing faces, scenes, and objects.
    pub fusion: Vec<EncoderBlockParams>,
    pub scene_head: LinearParams,
    pub face_head: LinearParams,
    pub object_head: LinearParams,
}

impl VisualParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        hidden: usize,
        heads: usize,
        fusion_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        VisualParams {
            wq: LinearParams::init(store, &format!("{name}.cam.q"), hidden, hidden, rng),
            wk: LinearParams::init(store, &format!("{name}.cam.k"), hidden, hidden, rng),
            wv: LinearParams::init(store, &format!("{name}.cam.v"), hidden, hidden, rng),
            gate: LinearParams::init(store, &format!("{name}.gate"), hidden, 1, rng),
            mixer: EncoderBlockParams::init(store, &format!("{name}.mixer"), hidden, heads, rng),
            fusion: (0..fusion_depth)
                .map(|i| {
                    EncoderBlockParams::init(store, &format!("{name}.fusion{i}"), hidden, heads, rng)
                })
                .collect(),
            scene_head: LinearParams::init(store, &format!("{name}.scene_head"), hidden, 3, rng),
            face_head: LinearParams::init(store, &format!("{name}.face_head"), hidden, 3, rng),
            object_head: LinearParams::init(store, &format!("{name}.object_head"), hidden, 3, rng),
        }
    }
}

/// Single-scale cross-attention: queries come from the scene token stacked
/// on the face tokens, keys and values from the face tokens alone. Padded
/// faces are masked out of the attention; the scene query row is retained in
/// the output, so the result has `1 + I` rows.
pub fn cam_cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    scene_row: NodeId,
    faces: NodeId,
    face_mask: &[bool],
    p: &VisualParams,
) -> Result<NodeId> {
    let d = g.shape(faces).cols;
    let rows = g.shape(faces).rows;
    if g.shape(scene_row).rows != 1 || g.shape(scene_row).cols != d {
        return Err(Error::ShapeMismatch {
            op: "cam_cross_attention",
            lhs: g.shape(scene_row).pair(),
            rhs: (1, d),
        });
    }
    if face_mask.len() != rows {
        return Err(Error::InvalidMask {
            op: "cam_cross_attention",
            detail: format!("face mask length {} != {} rows", face_mask.len(), rows),
        });
    }
    if !face_mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask {
            op: "cam_cross_attention",
            detail: "no valid faces".into(),
        });
    }
    let q_in = g.concat_rows(&[scene_row, faces])?;
    let q = nn::linear(g, bound, q_in, &p.wq)?;
    let k = nn::linear(g, bound, faces, &p.wk)?;
    let v = nn::linear(g, bound, faces, &p.wv)?;
    let k_t = g.transpose(k)?;
    let scores = g.matmul(q, k_t)?;
    let scaled = g.scale(scores, S::of(1.0 / (d as f64).sqrt()))?;
    let score_mask: Vec<bool> = (0..1 + rows).flat_map(|_| face_mask.iter().copied()).collect();
    let weights = g.softmax_rows_masked(scaled, &score_mask)?;
    g.matmul(weights, v)
}

/// Combine the per-scale attention outputs with sigmoid gates computed from
/// each scale's `[scene; faces]` stack. By default every row carries its own
/// gate; `per_scale` collapses the gate logits to one masked mean per scale
/// so each scale contributes through a single scalar.
pub fn multiscale_gate_fuse<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    attended: &[NodeId],
    scene_rows: &[NodeId],
    faces: NodeId,
    face_mask: &[bool],
    p: &VisualParams,
    per_scale: bool,
) -> Result<NodeId> {
    if attended.is_empty() || attended.len() != scene_rows.len() {
        return Err(Error::contract(format!(
            "gate fuse: {} attention outputs vs {} scene rows",
            attended.len(),
            scene_rows.len()
        )));
    }
    let mut fused: Option<NodeId> = None;
    for (&h_k, &scene_k) in attended.iter().zip(scene_rows) {
        let stacked = g.concat_rows(&[scene_k, faces])?;
        let logits = nn::linear(g, bound, stacked, &p.gate)?;
        let term = if per_scale {
            let mut keep = vec![true];
            keep.extend_from_slice(face_mask);
            let pooled = g.masked_mean_rows(logits, &keep)?;
            let gate = g.sigmoid(pooled)?;
            g.scale_by(h_k, gate)?
        } else {
            let gates = g.sigmoid(logits)?;
            g.scale_rows(h_k, gates)?
        };
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(fused.expect("at least one scale"))
}

/// Run the gated face representation and the scene tokens through one
/// encoder block. Returns the mixed tokens (`1 + I + K` rows) and the token
/// mask marking which rows are live.
pub fn face_scene_mix<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    gated: NodeId,
    scenes: NodeId,
    face_mask: &[bool],
    p: &VisualParams,
) -> Result<(NodeId, Vec<bool>)> {
    let k = g.shape(scenes).rows;
    let tokens = g.concat_rows(&[gated, scenes])?;
    let mut mask = Vec::with_capacity(1 + face_mask.len() + k);
    mask.push(true);
    mask.extend_from_slice(face_mask);
    mask.extend(std::iter::repeat(true).take(k));
    let mixed = nn::encoder_block(g, bound, tokens, &mask, &p.mixer)?;
    Ok((mixed, mask))
}

/// Append object tokens (if any), run the fusion encoder stack, and pool the
/// live tokens to the final visual representation (`1 x d`).
pub fn visual_fuse<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    mixed: NodeId,
    mixed_mask: &[bool],
    objects: Option<(NodeId, &[bool])>,
    p: &VisualParams,
) -> Result<NodeId> {
    let (mut tokens, mut mask) = (mixed, mixed_mask.to_vec());
    if let Some((obj, obj_mask)) = objects {
        if g.shape(obj).rows != obj_mask.len() {
            return Err(Error::InvalidMask {
                op: "visual_fuse",
                detail: format!(
                    "object mask length {} != {} rows",
                    obj_mask.len(),
                    g.shape(obj).rows
                ),
            });
        }
        tokens = g.concat_rows(&[tokens, obj])?;
        mask.extend_from_slice(obj_mask);
    }
    for block in &p.fusion {
        tokens = nn::encoder_block(g, bound, tokens, &mask, block)?;
    }
    g.masked_mean_rows(tokens, &mask)
}

/// Full visual pipeline for one sample: per-scale cross-attention, gated
/// scale fusion, face/scene mixing, and the deep fusion over objects.
#[allow(clippy::too_many_arguments)]
pub fn context_encode<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    faces: NodeId,
    face_mask: &[bool],
    scenes: NodeId,
    objects: Option<(NodeId, &[bool])>,
    p: &VisualParams,
    per_scale_gate: bool,
) -> Result<NodeId> {
    let k = g.shape(scenes).rows;
    let mut scene_rows = Vec::with_capacity(k);
    let mut attended = Vec::with_capacity(k);
    for s in 0..k {
        let scene_row = g.slice_rows(scenes, s, 1)?;
        attended.push(cam_cross_attention(g, bound, scene_row, faces, face_mask, p)?);
        scene_rows.push(scene_row);
    }
    let gated =
        multiscale_gate_fuse(g, bound, &attended, &scene_rows, faces, face_mask, p, per_scale_gate)?;
    let (mixed, mask) = face_scene_mix(g, bound, gated, scenes, face_mask, p)?;
    visual_fuse(g, bound, mixed, &mask, objects, p)
}

/// Flat alternative without the cross-attention stage: faces, scenes, and
/// objects go straight into the fusion encoder stack as one token set.
pub fn flat_context_encode<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    faces: NodeId,
    face_mask: &[bool],
    scenes: NodeId,
    objects: Option<(NodeId, &[bool])>,
    p: &VisualParams,
) -> Result<NodeId> {
    let k = g.shape(scenes).rows;
    let mut tokens = g.concat_rows(&[faces, scenes])?;
    let mut mask = face_mask.to_vec();
    mask.extend(std::iter::repeat(true).take(k));
    if let Some((obj, obj_mask)) = objects {
        tokens = g.concat_rows(&[tokens, obj])?;
        mask.extend_from_slice(obj_mask);
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask { op: "flat_context_encode", detail: "no live tokens".into() });
    }
    let mut x = tokens;
    for block in &p.fusion {
        x = nn::encoder_block(g, bound, x, &mask, block)?;
    }
    g.masked_mean_rows(x, &mask)
}

/// Pooled cue vectors and their per-cue logits. The object cue is absent for
/// samples with no objects.
pub struct CueOutputs {
    pub scene_pool: NodeId,
    pub face_pool: NodeId,
    pub object_pool: Option<NodeId>,
    pub scene_logits: NodeId,
    pub face_logits: NodeId,
    pub object_logits: Option<NodeId>,
}

pub fn cue_heads<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    faces: NodeId,
    face_mask: &[bool],
    scenes: NodeId,
    objects: Option<(NodeId, &[bool])>,
    p: &VisualParams,
) -> Result<CueOutputs> {
    let scene_pool = g.mean_rows(scenes)?;
    let face_pool = g.masked_mean_rows(faces, face_mask)?;
    let object_pool = match objects {
        Some((obj, obj_mask)) if obj_mask.iter().any(|&m| m) => {
            Some(g.masked_mean_rows(obj, obj_mask)?)
        }
        _ => None,
    };
    let scene_logits = nn::linear(g, bound, scene_pool, &p.scene_head)?;
    let face_logits = nn::linear(g, bound, face_pool, &p.face_head)?;
    let object_logits = match object_pool {
        Some(pool) => Some(nn::linear(g, bound, pool, &p.object_head)?),
        None => None,
    };
    Ok(CueOutputs { scene_pool, face_pool, object_pool, scene_logits, face_logits, object_logits })
}
