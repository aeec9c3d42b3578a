//! Per-variant forward wiring from a collated batch to group logits, cue
//! logits, and the optional alignment term.

use crate::autodiff::{Graph, NodeId, Shape};
use crate::config::{RunConfig, Variant};
use crate::data::{Batch, NUM_CLASSES};
use crate::error::Error;
use crate::fusion::{self, SimStats};
use crate::loss::{self, CueLogitBatch};
use crate::model::ModelParams;
use crate::nn;
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::semantic::{self, ClassGraph};
use crate::visual;
use crate::Result;

/// Everything the objective and the metrics need from one batch.
pub struct ForwardOutput {
    /// One `1 x 3` logit row per sample.
    pub group_logits: Vec<NodeId>,
    pub cues: CueLogitBatch,
    /// Raw visual/semantic similarity values, present only for variants
    /// with the similarity gate; feeds the running statistics in training.
    pub sims: Vec<f64>,
    /// Alignment loss node, present for variants that train with it.
    pub alignment: Option<NodeId>,
}

struct SampleInputs {
    faces: NodeId,
    face_mask: Vec<bool>,
    scenes: NodeId,
    objects: Option<(NodeId, Vec<bool>)>,
}

fn sample_inputs<S: Scalar>(g: &mut Graph<S>, batch: &Batch<S>, i: usize) -> SampleInputs {
    let faces = g.constant(
        Shape::of(batch.max_faces, batch.dim),
        batch.faces_of(i).to_vec(),
    );
    let scenes = g.constant(
        Shape::of(batch.scene_scales, batch.dim),
        batch.scenes_of(i).to_vec(),
    );
    let objects = if batch.max_objects > 0 && batch.object_mask_of(i).iter().any(|&m| m) {
        let node = g.constant(
            Shape::of(batch.max_objects, batch.dim),
            batch.objects_of(i).to_vec(),
        );
        Some((node, batch.object_mask_of(i).to_vec()))
    } else {
        None
    };
    SampleInputs { faces, face_mask: batch.face_mask_of(i).to_vec(), scenes, objects }
}

/// Run one collated batch through the configured variant.
pub fn forward_batch<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    model: &ModelParams,
    cfg: &RunConfig,
    class_graphs: &[ClassGraph; NUM_CLASSES],
    batch: &Batch<S>,
    stats: &SimStats,
) -> Result<ForwardOutput> {
    if batch.dim != cfg.hidden {
        return Err(Error::contract(format!(
            "dataset feature width {} does not match the configured hidden width {}",
            batch.dim, cfg.hidden
        )));
    }
    if batch.scene_scales != cfg.scene_scales {
        return Err(Error::contract(format!(
            "dataset has {} scene scales, configuration expects {}",
            batch.scene_scales, cfg.scene_scales
        )));
    }
    let n = batch.n;
    let variant = cfg.variant;

    let inputs: Vec<SampleInputs> = (0..n).map(|i| sample_inputs(g, batch, i)).collect();

    // Cue heads run in every variant; their losses regularize all wirings.
    let mut cues = CueLogitBatch { scene: Vec::new(), face: Vec::new(), object: Vec::new() };
    let mut cue_pools = Vec::with_capacity(n);
    for s in &inputs {
        let objects = s.objects.as_ref().map(|(node, mask)| (*node, mask.as_slice()));
        let out = visual::cue_heads(
            g,
            bound,
            s.faces,
            &s.face_mask,
            s.scenes,
            objects,
            &model.visual,
        )?;
        cues.scene.push(out.scene_logits);
        cues.face.push(out.face_logits);
        cues.object.push(out.object_logits);
        cue_pools.push((out.scene_pool, out.face_pool, out.object_pool));
    }

    // Batch-level semantic vectors for the variants that use them.
    let semantic_state = if variant.uses_semantic() {
        let mut class_vectors = Vec::with_capacity(NUM_CLASSES);
        for graph in class_graphs.iter() {
            let enc =
                semantic::encode_class_semantics(g, bound, graph, &model.semantic, cfg.esem_pool)?;
            class_vectors.push(enc.f_c);
        }
        let class_vectors: [NodeId; NUM_CLASSES] =
            class_vectors.try_into().map_err(|_| Error::contract("class count"))?;
        let f_t = semantic::assemble_semantic_rep(g, bound, &class_vectors, &model.semantic)?;
        Some((class_vectors, f_t))
    } else {
        None
    };

    // Per-sample visual representation for everything past the first
    // baseline.
    let visual_reps: Option<Vec<NodeId>> = if variant == Variant::B1 {
        None
    } else {
        let mut reps = Vec::with_capacity(n);
        for s in &inputs {
            let objects = s.objects.as_ref().map(|(node, mask)| (*node, mask.as_slice()));
            let fv = if variant.uses_context_mixer() {
                visual::context_encode(
                    g,
                    bound,
                    s.faces,
                    &s.face_mask,
                    s.scenes,
                    objects,
                    &model.visual,
                    cfg.gate_per_scale,
                )?
            } else {
                visual::flat_context_encode(
                    g,
                    bound,
                    s.faces,
                    &s.face_mask,
                    s.scenes,
                    objects,
                    &model.visual,
                )?
            };
            reps.push(fv);
        }
        Some(reps)
    };

    let mut sims = Vec::new();
    let mut alignment = None;
    let group_logits = match variant {
        Variant::B1 => {
            let mut logits = Vec::with_capacity(n);
            for (scene_pool, face_pool, object_pool) in cue_pools {
                let object = match object_pool {
                    Some(p) => p,
                    None => g.constant(Shape::of(1, cfg.hidden), vec![S::zero(); cfg.hidden]),
                };
                let cat = g.concat_cols(&[scene_pool, face_pool, object])?;
                logits.push(nn::linear(g, bound, cat, &model.cue_concat_head)?);
            }
            logits
        }
        Variant::B2NoCam | Variant::B2 => {
            let reps = visual_reps.expect("visual representations");
            let mut logits = Vec::with_capacity(n);
            for fv in reps {
                logits.push(nn::linear(g, bound, fv, &model.fusion.group_head)?);
            }
            logits
        }
        Variant::B3 => {
            let reps = visual_reps.expect("visual representations");
            let (_, f_t) = semantic_state.as_ref().expect("semantic state");
            let mut logits = Vec::with_capacity(n);
            for fv in reps {
                let cat = g.concat_cols(&[fv, *f_t])?;
                logits.push(nn::linear(g, bound, cat, &model.flat_concat_head)?);
            }
            logits
        }
        Variant::B4NoSam | Variant::B4NoSff | Variant::B4 => {
            let reps = visual_reps.expect("visual representations");
            let (class_vectors, f_t) = semantic_state.as_ref().expect("semantic state");
            let mut projected = Vec::with_capacity(n);
            for fv in reps {
                projected.push(nn::linear(g, bound, fv, &model.fusion.visual_proj)?);
            }
            let gates = if variant.uses_similarity_gate() {
                let mut sim_nodes = Vec::with_capacity(n);
                for &pv in &projected {
                    let sim = g.cosine(pv, *f_t)?;
                    sims.push(g.value(sim).f64());
                    sim_nodes.push(sim);
                }
                Some(fusion::standardized_gates(g, &sim_nodes, stats)?)
            } else {
                None
            };
            let mut logits = Vec::with_capacity(n);
            for (i, &pv) in projected.iter().enumerate() {
                let gate = gates.as_ref().map(|gs| gs[i]);
                let fused = fusion::fused_tokens(g, pv, *f_t, gate)?;
                let (_, sample_logits) = fusion::group_encode(g, bound, fused, &model.fusion)?;
                logits.push(sample_logits);
            }
            if variant.uses_alignment_loss() {
                let mut ft_rows = Vec::with_capacity(n);
                for &label in &batch.labels {
                    ft_rows.push(semantic::class_semantic_for_label(
                        g,
                        bound,
                        class_vectors,
                        label,
                        &model.semantic,
                    )?);
                }
                alignment = Some(loss::alignment_loss(
                    g,
                    &projected,
                    &ft_rows,
                    &batch.labels,
                    cfg.tau,
                    cfg.sam_eps,
                    cfg.sam_alpha_literal,
                )?);
            }
            logits
        }
    };

    Ok(ForwardOutput { group_logits, cues, sims, alignment })
}
