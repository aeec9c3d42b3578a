//! Training objectives: numerically stable cross-entropy for the group and
//! cue heads, the bidirectional label-agreement alignment loss over
//! visual/semantic pairs, and the composed total objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Shape};
use crate::data::NUM_CLASSES;
use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// `-log softmax(logits)[label]` for a single `1 x 3` logit row, computed
/// with a max shift so saturated logits stay finite.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: NodeId, label: u8) -> Result<NodeId> {
    let shape = g.shape(logits);
    if shape.rows != 1 || shape.cols != NUM_CLASSES {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.pair(),
            rhs: (1, NUM_CLASSES),
        });
    }
    if label as usize >= NUM_CLASSES {
        return Err(Error::contract(format!("label {label} outside 0..=2")));
    }
    let max = g
        .data(logits)
        .iter()
        .fold(S::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let shifted = g.add_const(logits, -max)?;
    let exps = g.exp(shifted)?;
    let z = g.sum_all(exps)?;
    let log_z = g.log(z)?;
    let picked = g.slice_cols(shifted, label as usize, 1)?;
    g.sub(log_z, picked)
}

/// `N x N` cosine similarity grid between two row lists: entry `(i, j)` is
/// the similarity of `left[i]` and `right[j]`.
pub fn pairwise_similarity<S: Scalar>(
    g: &mut Graph<S>,
    left: &[NodeId],
    right: &[NodeId],
) -> Result<NodeId> {
    if left.is_empty() || left.len() != right.len() {
        return Err(Error::contract(format!(
            "pairwise_similarity: {} left rows vs {} right rows",
            left.len(),
            right.len()
        )));
    }
    let mut rows = Vec::with_capacity(left.len());
    for &l in left {
        let mut cells = Vec::with_capacity(right.len());
        for &r in right {
            cells.push(g.cosine(l, r)?);
        }
        rows.push(g.concat_cols(&cells)?);
    }
    g.concat_rows(&rows)
}

/// Row-wise softmax over temperature-sharpened similarities. The default
/// divides by the temperature; `alpha_literal` multiplies by it instead.
pub fn match_probabilities<S: Scalar>(
    g: &mut Graph<S>,
    sim: NodeId,
    tau: f64,
    alpha_literal: bool,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("temperature {tau} must be positive")));
    }
    let factor = if alpha_literal { tau } else { 1.0 / tau };
    let scaled = g.scale(sim, S::of(factor))?;
    g.softmax_rows(scaled)
}

/// Row-stochastic label-agreement target: entry `(i, j)` is
/// `[labels(i) == labels(j)] / #{k : labels(k) == labels(i)}`, the diagonal
/// included in the count.
pub fn ground_truth_distribution(labels: &[u8]) -> Vec<f64> {
    let n = labels.len();
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        let agree = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..n {
            if labels[i] == labels[j] {
                q[i * n + j] = 1.0 / agree;
            }
        }
    }
    q
}

/// Mean per-sample KL divergence from the agreement target to the match
/// distribution, summed over both match directions (left-to-right plus
/// right-to-left).
pub fn alignment_loss<S: Scalar>(
    g: &mut Graph<S>,
    left: &[NodeId],
    right: &[NodeId],
    labels: &[u8],
    tau: f64,
    eps: f64,
    alpha_literal: bool,
) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 || left.len() != n || right.len() != n {
        return Err(Error::contract(format!(
            "alignment_loss: {} left, {} right, {} labels",
            left.len(),
            right.len(),
            n
        )));
    }
    let q = ground_truth_distribution(labels);
    // Entropy side of the divergence, constant in the parameters. Zero
    // entries contribute exactly zero.
    let q_entropy: f64 = q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let q_node = g.constant(Shape::of(n, n), q.iter().map(|&v| S::of(v)).collect());

    let sim = pairwise_similarity(g, left, right)?;
    let mut total: Option<NodeId> = None;
    for direction in 0..2 {
        let sim_dir = if direction == 0 { sim } else { g.transpose(sim)? };
        let p = match_probabilities(g, sim_dir, tau, alpha_literal)?;
        let p_eps = g.add_const(p, S::of(eps))?;
        let log_p = g.log(p_eps)?;
        let weighted = g.mul(q_node, log_p)?;
        let cross = g.sum_all(weighted)?;
        let neg_cross = g.scale(cross, S::of(-1.0 / n as f64))?;
        let entropy = g.scalar_const(S::of(q_entropy / n as f64));
        let term = g.add(neg_cross, entropy)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// Scalar breakdown of one batch's objective. `l_total` is the plain sum of
/// the five component fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_group: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub l_o: f64,
    pub l_sam: f64,
    pub l_total: f64,
}

/// The composed objective: the graph node to differentiate plus the scalar
/// breakdown for logging.
pub struct LossNodes {
    pub total: NodeId,
    pub report: LossReport,
}

/// Per-sample cue logits for one batch. A `None` object entry marks a
/// sample without objects; such samples drop out of the object term.
pub struct CueLogitBatch {
    pub scene: Vec<NodeId>,
    pub face: Vec<NodeId>,
    pub object: Vec<Option<NodeId>>,
}

fn mean_of<S: Scalar>(g: &mut Graph<S>, nodes: &[NodeId]) -> Result<NodeId> {
    let stack = g.concat_rows(nodes)?;
    g.mean_rows(stack)
}

/// Compose the batch objective: mean cross-entropy of the group head and of
/// each cue head (the object term averages only samples that have objects),
/// plus the alignment term when one is supplied.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    group_logits: &[NodeId],
    cues: &CueLogitBatch,
    labels: &[u8],
    alignment: Option<NodeId>,
) -> Result<LossNodes> {
    let n = labels.len();
    if n == 0
        || group_logits.len() != n
        || cues.scene.len() != n
        || cues.face.len() != n
        || cues.object.len() != n
    {
        return Err(Error::contract(format!(
            "total_loss: {} labels, {} group, {} scene, {} face, {} object entries",
            n,
            group_logits.len(),
            cues.scene.len(),
            cues.face.len(),
            cues.object.len()
        )));
    }
    let mut group_ces = Vec::with_capacity(n);
    let mut scene_ces = Vec::with_capacity(n);
    let mut face_ces = Vec::with_capacity(n);
    let mut object_ces = Vec::new();
    for i in 0..n {
        group_ces.push(cross_entropy(g, group_logits[i], labels[i])?);
        scene_ces.push(cross_entropy(g, cues.scene[i], labels[i])?);
        face_ces.push(cross_entropy(g, cues.face[i], labels[i])?);
        if let Some(obj) = cues.object[i] {
            object_ces.push(cross_entropy(g, obj, labels[i])?);
        }
    }
    let l_group = mean_of(g, &group_ces)?;
    let l_s = mean_of(g, &scene_ces)?;
    let l_f = mean_of(g, &face_ces)?;
    let l_o = if object_ces.is_empty() { None } else { Some(mean_of(g, &object_ces)?) };

    let mut total = g.add(l_group, l_s)?;
    total = g.add(total, l_f)?;
    if let Some(lo) = l_o {
        total = g.add(total, lo)?;
    }
    if let Some(sam) = alignment {
        if !g.shape(sam).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                lhs: g.shape(sam).pair(),
                rhs: (1, 1),
            });
        }
        total = g.add(total, sam)?;
    }

    let report = {
        let l_group = g.value(l_group).f64();
        let l_s = g.value(l_s).f64();
        let l_f = g.value(l_f).f64();
        let l_o = l_o.map_or(0.0, |n| g.value(n).f64());
        let l_sam = alignment.map_or(0.0, |n| g.value(n).f64());
        LossReport { l_group, l_s, l_f, l_o, l_sam, l_total: l_group + l_s + l_f + l_o + l_sam }
    };
    Ok(LossNodes { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row<S: Scalar>(g: &mut Graph<S>, vals: &[f64]) -> NodeId {
        g.constant(Shape::of(1, vals.len()), vals.iter().map(|&v| S::of(v)).collect())
    }

    #[test]
    fn uniform_logits_cost_ln_three() {
        let mut g: Graph<f64> = Graph::eval();
        let logits = row(&mut g, &[0.0, 0.0, 0.0]);
        let loss = cross_entropy(&mut g, logits, 1).unwrap();
        assert!((g.value(loss) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ascending_logits_match_the_closed_form() {
        // [DERIVED] -log softmax([1,2,3])[0] = ln(e + e^2 + e^3) - 1.
        let mut g: Graph<f64> = Graph::eval();
        let logits = row(&mut g, &[1.0, 2.0, 3.0]);
        let loss = cross_entropy(&mut g, logits, 0).unwrap();
        let want = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln() - 1.0;
        assert!((g.value(loss) - want).abs() < 1e-12);
        assert!((g.value(loss) - 2.4076059644443806).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let mut g: Graph<f64> = Graph::eval();
        let confident = row(&mut g, &[1000.0, 0.0, 0.0]);
        let right = cross_entropy(&mut g, confident, 0).unwrap();
        assert!(g.value(right).is_finite());
        assert!(g.value(right).abs() < 1e-12);
        let wrong = row(&mut g, &[0.0, 1000.0, 0.0]);
        let loss = cross_entropy(&mut g, wrong, 0).unwrap();
        assert!((g.value(loss) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let mut g: Graph<f64> = Graph::eval();
        let logits = row(&mut g, &[0.0, 0.0, 0.0]);
        assert!(matches!(cross_entropy(&mut g, logits, 3), Err(Error::Contract(_))));
        let wide = row(&mut g, &[0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&mut g, wide, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn orthonormal_rows_give_an_identity_similarity_grid() {
        let mut g: Graph<f64> = Graph::eval();
        let e1 = row(&mut g, &[1.0, 0.0]);
        let e2 = row(&mut g, &[0.0, 1.0]);
        let sim = pairwise_similarity(&mut g, &[e1, e2], &[e1, e2]).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0];
        for (got, want) in g.data(sim).iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_sharpens_match_probabilities() {
        let mut g: Graph<f64> = Graph::eval();
        let sim = g.constant(Shape::of(1, 2), vec![0.6, 0.4]);
        let p = match_probabilities(&mut g, sim, 0.02, false).unwrap();
        // Logit gap 0.2 becomes 10 after dividing by the temperature.
        let want0 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((g.data(p)[0] - want0).abs() < 1e-12);
        let literal = match_probabilities(&mut g, sim, 0.02, true).unwrap();
        let gap: f64 = 0.2 * 0.02;
        let lit0 = 1.0 / (1.0 + (-gap).exp());
        assert!((g.data(literal)[0] - lit0).abs() < 1e-12);
        assert!(matches!(
            match_probabilities(&mut g, sim, 0.0, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn agreement_targets_match_hand_counts() {
        // [DERIVED] per-row agreement sets counted by hand.
        assert_eq!(
            ground_truth_distribution(&[0, 0, 1]),
            vec![0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            ground_truth_distribution(&[0, 1, 2]),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(ground_truth_distribution(&[2, 2, 2, 2]), vec![0.25; 16]);
    }

    #[test]
    fn alignment_worked_case_reaches_the_pinned_value() {
        // [DERIVED] two samples, distinct labels, identity similarity,
        // temperature 1, no stabilizer: each direction contributes
        // -log sigmoid(1) and the total is 0.62652338...
        let mut g: Graph<f64> = Graph::eval();
        let e1 = row(&mut g, &[1.0, 0.0]);
        let e2 = row(&mut g, &[0.0, 1.0]);
        let loss = alignment_loss(&mut g, &[e1, e2], &[e1, e2], &[0, 1], 1.0, 0.0, false).unwrap();
        assert!((g.value(loss) - 0.6265233750364456).abs() < 1e-9);
    }

    #[test]
    fn matching_distributions_cost_nothing() {
        // All labels equal and all vectors identical: the match distribution
        // is uniform and equals the agreement target, so the loss vanishes.
        let mut g: Graph<f64> = Graph::eval();
        let v = row(&mut g, &[0.3, 0.4]);
        let loss = alignment_loss(&mut g, &[v, v], &[v, v], &[1, 1], 0.5, 0.0, false).unwrap();
        assert!(g.value(loss).abs() < 1e-12);
    }

    #[test]
    fn single_sample_alignment_is_negligible() {
        let mut g: Graph<f64> = Graph::eval();
        let v = row(&mut g, &[0.3, 0.4]);
        let w = row(&mut g, &[0.5, -0.1]);
        let loss = alignment_loss(&mut g, &[v], &[w], &[2], 0.02, 1e-8, false).unwrap();
        assert!(g.value(loss).abs() < 1e-6);
    }

    #[test]
    fn sample_order_does_not_change_the_alignment_loss() {
        let mut g: Graph<f64> = Graph::eval();
        let l: Vec<NodeId> = [
            [0.9, 0.1, 0.3],
            [0.2, 0.8, -0.4],
            [-0.6, 0.5, 0.2],
        ]
        .iter()
        .map(|v| row(&mut g, v))
        .collect();
        let r: Vec<NodeId> = [
            [0.7, 0.2, 0.1],
            [0.1, 0.9, 0.0],
            [-0.5, 0.4, 0.6],
        ]
        .iter()
        .map(|v| row(&mut g, v))
        .collect();
        let labels = [0u8, 1, 0];
        let base = alignment_loss(&mut g, &l, &r, &labels, 0.5, 1e-8, false).unwrap();
        let perm = [2usize, 0, 1];
        let lp: Vec<NodeId> = perm.iter().map(|&i| l[i]).collect();
        let rp: Vec<NodeId> = perm.iter().map(|&i| r[i]).collect();
        let labp: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let shuffled = alignment_loss(&mut g, &lp, &rp, &labp, 0.5, 1e-8, false).unwrap();
        assert!((g.value(base) - g.value(shuffled)).abs() < 1e-9);
    }

    #[test]
    fn total_of_uniform_heads_is_four_ln_three() {
        // [DERIVED] all-zero logits on every head: each of the four
        // cross-entropy terms is ln 3.
        let mut g: Graph<f64> = Graph::eval();
        let n = 4usize;
        let zeros: Vec<NodeId> = (0..n).map(|_| row(&mut g, &[0.0; 3])).collect();
        let cues = CueLogitBatch {
            scene: zeros.clone(),
            face: zeros.clone(),
            object: zeros.iter().map(|&z| Some(z)).collect(),
        };
        let labels = [0u8, 1, 2, 0];
        let out = total_loss(&mut g, &zeros, &cues, &labels, None).unwrap();
        let ln3 = 3.0f64.ln();
        assert!((g.value(out.total) - 4.0 * ln3).abs() < 1e-12);
        assert!((out.report.l_group - ln3).abs() < 1e-12);
        assert!((out.report.l_o - ln3).abs() < 1e-12);
        assert_eq!(out.report.l_sam, 0.0);
        let sum = out.report.l_group
            + out.report.l_s
            + out.report.l_f
            + out.report.l_o
            + out.report.l_sam;
        assert_eq!(out.report.l_total, sum);
    }

    #[test]
    fn objectless_samples_drop_out_of_the_object_term() {
        let mut g: Graph<f64> = Graph::eval();
        let uniform = row(&mut g, &[0.0; 3]);
        let confident = row(&mut g, &[30.0, 0.0, 0.0]);
        let cues = CueLogitBatch {
            scene: vec![uniform, uniform],
            face: vec![uniform, uniform],
            // Only the first sample has objects, and its head is confident
            // and right, so the object term is almost zero rather than an
            // average with ln 3.
            object: vec![Some(confident), None],
        };
        let out = total_loss(&mut g, &[uniform, uniform], &cues, &[0, 1], None).unwrap();
        assert!(out.report.l_o.abs() < 1e-9);

        let no_obj = CueLogitBatch {
            scene: vec![uniform, uniform],
            face: vec![uniform, uniform],
            object: vec![None, None],
        };
        let out2 = total_loss(&mut g, &[uniform, uniform], &no_obj, &[0, 1], None).unwrap();
        assert_eq!(out2.report.l_o, 0.0);
        let sum = out2.report.l_group + out2.report.l_s + out2.report.l_f;
        assert!((g.value(out2.total) - sum).abs() < 1e-12);
    }

    #[test]
    fn alignment_term_joins_the_total() {
        let mut g: Graph<f64> = Graph::eval();
        let uniform = row(&mut g, &[0.0; 3]);
        let e1 = row(&mut g, &[1.0, 0.0]);
        let e2 = row(&mut g, &[0.0, 1.0]);
        let sam = alignment_loss(&mut g, &[e1, e2], &[e1, e2], &[0, 1], 1.0, 0.0, false).unwrap();
        let cues = CueLogitBatch {
            scene: vec![uniform, uniform],
            face: vec![uniform, uniform],
            object: vec![None, None],
        };
        let out = total_loss(&mut g, &[uniform, uniform], &cues, &[0, 1], Some(sam)).unwrap();
        assert!((out.report.l_sam - 0.6265233750364456).abs() < 1e-9);
        assert_eq!(
            out.report.l_total,
            out.report.l_group + out.report.l_s + out.report.l_f + out.report.l_o + out.report.l_sam
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn agreement_rows_are_stochastic(labels in proptest::collection::vec(0u8..3, 1..7)) {
            let q = ground_truth_distribution(&labels);
            let n = labels.len();
            for i in 0..n {
                let sum: f64 = q[i * n..(i + 1) * n].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(q[i * n..(i + 1) * n].iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn match_rows_are_stochastic(values in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let mut g: Graph<f64> = Graph::eval();
            let sim = g.constant(Shape::of(3, 3), values);
            let p = match_probabilities(&mut g, sim, 0.02, false).unwrap();
            for i in 0..3 {
                let sum: f64 = g.data(p)[i * 3..(i + 1) * 3].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn alignment_loss_is_nonnegative_without_stabilizer(
            raw in proptest::collection::vec(-1.0f64..1.0, 12),
            labels in proptest::collection::vec(0u8..3, 2),
        ) {
            let mut g: Graph<f64> = Graph::eval();
            let mk = |g: &mut Graph<f64>, v: &[f64]| {
                g.constant(Shape::of(1, 3), v.to_vec())
            };
            let l = [mk(&mut g, &raw[0..3]), mk(&mut g, &raw[3..6])];
            let r = [mk(&mut g, &raw[6..9]), mk(&mut g, &raw[9..12])];
            // Skip degenerate draws (nearly zero vectors are rejected).
            let ok = raw.chunks(3).all(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3);
            prop_assume!(ok);
            let loss = alignment_loss(&mut g, &l, &r, &labels, 0.5, 0.0, false).unwrap();
            prop_assert!(g.value(loss) >= -1e-9);
        }
    }
}
