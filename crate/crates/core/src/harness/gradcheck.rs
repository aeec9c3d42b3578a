//! Finite-difference verification of the analytic gradients, from single
//! primitives up through the full model, always in 64-bit precision.
//!
//! The comparison oracle is independent of the reverse pass: every
//! parameter entry is perturbed by ±h and the loss re-evaluated, giving a
//! central-difference slope to hold the analytic gradient against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Shape};
use crate::config::{RunConfig, Variant};
use crate::data::collate;
use crate::error::Error;
use crate::fusion::{self, FusionParams, SimStats};
use crate::harness::forward;
use crate::loss;
use crate::model::ModelParams;
use crate::nn::{self, EncoderBlockParams, LinearParams};
use crate::params::{Bound, ParamStore};
use crate::semantic::{self, build_class_graphs, SemanticParams};
use crate::visual::{self, VisualParams};
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub all_pass: bool,
}

impl CheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {:<28} max_rel_err {:.3e} (tolerance {:.0e})\n",
                if e.pass { "PASS" } else { "FAIL" },
                e.name,
                e.max_rel_err,
                e.tolerance
            ));
        }
        out.push_str(if self.all_pass { "all gradient checks passed\n" } else { "GRADIENT CHECKS FAILED\n" });
        out
    }
}

/// Relative disagreement between an analytic and a numeric slope, with the
/// denominator floored at 1 so slopes near zero compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn new_graph(train_mode: bool) -> Graph<f64> {
    if train_mode {
        // Dropout rate 0 keeps the pass deterministic while still exercising
        // the training-only code paths (batch standardization).
        Graph::train(0.0, 7)
    } else {
        Graph::eval()
    }
}

/// Compare the reverse-pass gradients of `build`'s scalar output against
/// central differences over every entry of every parameter in `store`.
fn check_params<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    train_mode: bool,
    build: F,
) -> Result<CheckEntry>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>,
{
    let grads = {
        let mut g = new_graph(train_mode);
        let bound = store.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        if !g.shape(loss).is_scalar() {
            return Err(Error::contract(format!("{name}: loss is not scalar")));
        }
        g.backward(loss)?;
        store.collect_grads(&g, &bound)
    };
    let eval_loss = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = new_graph(train_mode);
        let bound = store.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss))
    };

    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut max = 0.0f64;
    for (idx, pname) in names.iter().enumerate() {
        let id = store.find(pname).expect("known name");
        let len = store.data(id).len();
        for j in 0..len {
            let orig = store.data(id)[j];
            store.data_mut(id)[j] = orig + STEP;
            let f_plus = eval_loss(store)?;
            store.data_mut(id)[j] = orig - STEP;
            let f_minus = eval_loss(store)?;
            store.data_mut(id)[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * STEP);
            max = max.max(rel_err(grads[idx][j], numeric));
        }
    }
    Ok(CheckEntry { name: name.into(), max_rel_err: max, tolerance: TOLERANCE, pass: max < TOLERANCE })
}

fn filled(store: &mut ParamStore<f64>, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let id = store.zeros(name, rows, cols);
    store.data_mut(id).copy_from_slice(values);
}

/// Deterministic, nonzero fixture values in (-0.75, 0.75), away from relu
/// and max kinks for the sizes used here.
fn wave(seed: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| (((seed * 37 + i * 11) % 17) as f64 - 7.3) / 11.0).collect()
}

fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: usize) -> Result<NodeId> {
    let s = g.shape(x);
    let w = g.constant(s, wave(seed, s.len()));
    let prod = g.mul(x, w)?;
    g.sum_all(prod)
}

/// Run the complete verification ladder.
pub fn run_suite() -> Result<CheckReport> {
    let mut entries = Vec::new();

    // --- primitives ---------------------------------------------------
    {
        let mut store = ParamStore::new();
        filled(&mut store, "x", 2, 3, &wave(1, 6));
        filled(&mut store, "w", 3, 2, &wave(2, 6));
        let x_id = store.find("x").unwrap();
        let w_id = store.find("w").unwrap();
        entries.push(check_params("prim.matmul_relu", &mut store, false, move |g, b| {
            let prod = g.matmul(b.node(x_id), b.node(w_id))?;
            let act = g.relu(prod)?;
            weighted_sum(g, act, 3)
        })?);
    }
    {
        let mut store = ParamStore::new();
        filled(&mut store, "x", 2, 4, &wave(4, 8));
        let x_id = store.find("x").unwrap();
        let mask = vec![true, false, true, true, true, true, false, true];
        entries.push(check_params("prim.masked_softmax", &mut store, false, move |g, b| {
            let sm = g.softmax_rows_masked(b.node(x_id), &mask)?;
            weighted_sum(g, sm, 5)
        })?);
    }
    {
        let mut store = ParamStore::new();
        filled(&mut store, "x", 2, 4, &wave(6, 8));
        filled(&mut store, "gamma", 1, 4, &[1.1, 0.9, 1.3, 0.7]);
        filled(&mut store, "beta", 1, 4, &wave(7, 4));
        let x_id = store.find("x").unwrap();
        let g_id = store.find("gamma").unwrap();
        let b_id = store.find("beta").unwrap();
        entries.push(check_params("prim.layer_norm", &mut store, false, move |g, b| {
            let ln = g.layer_norm(b.node(x_id), b.node(g_id), b.node(b_id))?;
            weighted_sum(g, ln, 8)
        })?);
    }
    {
        let mut store = ParamStore::new();
        filled(&mut store, "a", 1, 5, &wave(9, 5));
        filled(&mut store, "b", 1, 5, &wave(10, 5));
        let a_id = store.find("a").unwrap();
        let b_id = store.find("b").unwrap();
        entries.push(check_params("prim.cosine", &mut store, false, move |g, b| {
            g.cosine(b.node(a_id), b.node(b_id))
        })?);
    }
    {
        let mut store = ParamStore::new();
        filled(&mut store, "x", 1, 4, &[0.8, 1.3, 0.4, 2.1]);
        let x_id = store.find("x").unwrap();
        entries.push(check_params("prim.exp_log_sqrt_recip", &mut store, false, move |g, b| {
            let e = g.exp(b.node(x_id))?;
            let l = g.log(e)?;
            let sq = g.sqrt(l)?;
            let r = g.recip(sq)?;
            weighted_sum(g, r, 11)
        })?);
    }

    // --- blocks --------------------------------------------------------
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let lin = LinearParams::init(&mut store, "lin", 4, 2, &mut rng);
        filled(&mut store, "x", 3, 4, &wave(12, 12));
        let x_id = store.find("x").unwrap();
        entries.push(check_params("block.linear", &mut store, false, move |g, b| {
            let y = nn::linear(g, b, b.node(x_id), &lin)?;
            weighted_sum(g, y, 13)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let block = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        filled(&mut store, "x", 4, 4, &wave(14, 16));
        let x_id = store.find("x").unwrap();
        let mask = vec![true, true, false, true];
        let attn_mask = mask.clone();
        entries.push(check_params("block.attention", &mut store, false, move |g, b| {
            let y = nn::multi_head_attention(g, b, b.node(x_id), b.node(x_id), b.node(x_id), &attn_mask, &block)?;
            weighted_sum(g, y, 15)
        })?);
        let mut store2 = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(53);
        let block2 = EncoderBlockParams::init(&mut store2, "blk", 4, 2, &mut rng2);
        filled(&mut store2, "x", 4, 4, &wave(16, 16));
        let x2_id = store2.find("x").unwrap();
        entries.push(check_params("block.encoder", &mut store2, false, move |g, b| {
            let y = nn::encoder_block(g, b, b.node(x2_id), &mask, &block2)?;
            weighted_sum(g, y, 17)
        })?);
    }
    {
        // Normalized adjacency for a 3-node chain with weighted edges.
        let a = [1.0, 0.6, 0.0, 0.6, 1.0, 0.4, 0.0, 0.4, 1.0];
        let mut a_hat = [0.0f64; 9];
        let deg: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j]).sum::<f64>().sqrt().recip())
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                a_hat[i * 3 + j] = deg[i] * a[i * 3 + j] * deg[j];
            }
        }
        let mut store = ParamStore::new();
        filled(&mut store, "h", 3, 2, &wave(18, 6));
        filled(&mut store, "w", 2, 2, &wave(19, 4));
        let h_id = store.find("h").unwrap();
        let w_id = store.find("w").unwrap();
        entries.push(check_params("block.gcn", &mut store, false, move |g, b| {
            let a_node = nn::adjacency_constant(g, &a_hat, 3)?;
            let y = nn::gcn_layer(g, b.node(h_id), a_node, b.node(w_id))?;
            weighted_sum(g, y, 20)
        })?);
    }

    // --- modules -------------------------------------------------------
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let vp = VisualParams::init(&mut store, "vis", 4, 2, 1, &mut rng);
        let faces = wave(21, 12);
        let scenes = wave(22, 8);
        let objects = wave(23, 8);
        entries.push(check_params("module.visual_context", &mut store, false, move |g, b| {
            let f = g.constant(Shape::of(3, 4), faces.clone());
            let s = g.constant(Shape::of(2, 4), scenes.clone());
            let o = g.constant(Shape::of(2, 4), objects.clone());
            let face_mask = [true, true, false];
            let obj_mask = [true, false];
            let fv = visual::context_encode(g, b, f, &face_mask, s, Some((o, &obj_mask)), &vp, false)?;
            let cues = visual::cue_heads(g, b, f, &face_mask, s, Some((o, &obj_mask)), &vp)?;
            let mut total = weighted_sum(g, fv, 24)?;
            for (seed, node) in [
                (25, cues.scene_logits),
                (26, cues.face_logits),
                (27, cues.object_logits.expect("objects present")),
            ] {
                let term = weighted_sum(g, node, seed)?;
                total = g.add(total, term)?;
            }
            Ok(total)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let sp = SemanticParams::init(
            &mut store,
            "sem",
            3,
            3,
            4,
            crate::config::SemanticPool::Sum,
            &mut rng,
        );
        let lex = tiny_lexicons(3);
        let graphs = build_class_graphs(&lex)?;
        entries.push(check_params("module.semantic", &mut store, false, move |g, b| {
            let mut vectors = Vec::new();
            for graph in graphs.iter() {
                let enc = semantic::encode_class_semantics(
                    g,
                    b,
                    graph,
                    &sp,
                    crate::config::SemanticPool::Sum,
                )?;
                vectors.push(enc.f_c);
            }
            let vectors: [NodeId; 3] = vectors.try_into().unwrap();
            let f_t = semantic::assemble_semantic_rep(g, b, &vectors, &sp)?;
            let for_label = semantic::class_semantic_for_label(g, b, &vectors, 1, &sp)?;
            let a = weighted_sum(g, f_t, 28)?;
            let c = weighted_sum(g, for_label, 29)?;
            g.add(a, c)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let fp = FusionParams::init(&mut store, "fuse", 4, 2, 1, &mut rng);
        filled(&mut store, "fv0", 1, 4, &wave(30, 4));
        filled(&mut store, "fv1", 1, 4, &wave(31, 4));
        let fv0 = store.find("fv0").unwrap();
        let fv1 = store.find("fv1").unwrap();
        let semantic_row = wave(32, 4);
        // Train mode: the batch standardization itself must carry gradient.
        entries.push(check_params("module.similarity_fusion", &mut store, true, move |g, b| {
            let t = g.constant(Shape::of(1, 4), semantic_row.clone());
            let stats = SimStats::new(0.9);
            let mut sims = Vec::new();
            let mut projected = Vec::new();
            for id in [fv0, fv1] {
                let pv = nn::linear(g, b, b.node(id), &fp.visual_proj)?;
                sims.push(g.cosine(pv, t)?);
                projected.push(pv);
            }
            let gates = fusion::standardized_gates(g, &sims, &stats)?;
            let mut total: Option<NodeId> = None;
            for (i, &pv) in projected.iter().enumerate() {
                let fused = fusion::fused_tokens(g, pv, t, Some(gates[i]))?;
                let (_, logits) = fusion::group_encode(g, b, fused, &fp)?;
                let ce = loss::cross_entropy(g, logits, i as u8)?;
                total = Some(match total {
                    None => ce,
                    Some(acc) => g.add(acc, ce)?,
                });
            }
            Ok(total.expect("two samples"))
        })?);
    }
    {
        let mut store = ParamStore::new();
        filled(&mut store, "l0", 1, 3, &wave(33, 3));
        filled(&mut store, "l1", 1, 3, &wave(34, 3));
        filled(&mut store, "r0", 1, 3, &wave(35, 3));
        filled(&mut store, "r1", 1, 3, &wave(36, 3));
        let ids: Vec<_> = ["l0", "l1", "r0", "r1"].iter().map(|n| store.find(n).unwrap()).collect();
        entries.push(check_params("module.alignment_loss", &mut store, false, move |g, b| {
            let left = [b.node(ids[0]), b.node(ids[1])];
            let right = [b.node(ids[2]), b.node(ids[3])];
            loss::alignment_loss(g, &left, &right, &[0, 1], 0.5, 1e-8, false)
        })?);
    }

    // --- full model ----------------------------------------------------
    entries.extend(full_model_checks()?);

    let all_pass = entries.iter().all(|e| e.pass);
    Ok(CheckReport { entries, all_pass })
}

fn tiny_lexicons(dim: usize) -> crate::data::lexicon::LexiconSet {
    use crate::data::lexicon::{hash_embedding, LexiconClass, LexiconEntry, LexiconSet};
    let class = |name: &str, words: &[&str]| LexiconClass {
        name: name.into(),
        class_word: name[0..1].to_uppercase() + &name[1..],
        class_embedding: hash_embedding(name, dim),
        entries: words
            .iter()
            .map(|w| LexiconEntry { word: w.to_string(), embedding: hash_embedding(w, dim) })
            .collect(),
    };
    LexiconSet {
        dim,
        classes: [
            class("positive", &["joy", "unity"]),
            class("neutral", &["calm", "routine"]),
            class("negative", &["anger", "grief"]),
        ],
    }
}

/// Full-model check: the complete two-sample batch objective of the richest
/// variant, differentiated against every parameter, plus an entry asserting
/// that the heads other variants own receive exactly zero gradient.
fn full_model_checks() -> Result<Vec<CheckEntry>> {
    let cfg = RunConfig {
        hidden: 6,
        heads: 2,
        fusion_depth: 2,
        scene_scales: 2,
        embed_dim: 5,
        batch_size: 2,
        variant: Variant::B4,
        seed: 42,
        ..RunConfig::default()
    };
    let (mut store, model) = ModelParams::init::<f64>(&cfg);
    let lexicons = tiny_lexicons(cfg.embed_dim);
    let class_graphs = build_class_graphs(&lexicons)?;
    let bundles = forward_micro_bundles(cfg.hidden);
    let batch = collate::<f64>(&bundles, cfg.scene_scales)?;
    let stats = SimStats::new(0.9);

    let cfg_for_build = cfg.clone();
    let build = move |g: &mut Graph<f64>, b: &Bound| -> Result<NodeId> {
        let out = forward::forward_batch(g, b, &model, &cfg_for_build, &class_graphs, &batch, &stats)?;
        let objective = loss::total_loss(g, &out.group_logits, &out.cues, &batch.labels, out.alignment)?;
        Ok(objective.total)
    };

    // Unused-head assertion first, from one analytic pass.
    let unused_max = {
        let mut g = new_graph(true);
        let bound = store.bind(&mut g);
        let loss_node = build(&mut g, &bound)?;
        g.backward(loss_node)?;
        let grads = store.collect_grads(&g, &bound);
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        let mut max = 0.0f64;
        for (idx, name) in names.iter().enumerate() {
            if name.starts_with("cue_concat_head") || name.starts_with("flat_concat_head") {
                for &v in &grads[idx] {
                    max = max.max(v.abs());
                }
            }
        }
        max
    };
    let unused_entry = CheckEntry {
        name: "full.unused_heads_zero_grad".into(),
        max_rel_err: unused_max,
        tolerance: TOLERANCE,
        pass: unused_max == 0.0,
    };

    let main = check_params("full.b4_micro_batch", &mut store, true, build)?;
    Ok(vec![main, unused_entry])
}

fn forward_micro_bundles(dim: usize) -> Vec<crate::data::FeatureBundle> {
    let wave = |seed: usize, len: usize| -> Vec<f64> {
        (0..len).map(|i| ((seed * 31 + i * 7) % 13) as f64 / 13.0 - 0.4).collect()
    };
    (0..2)
        .map(|s| crate::data::FeatureBundle {
            id: format!("micro_{s}"),
            label: s as u8,
            faces: (0..2).map(|f| wave(s * 10 + f, dim)).collect(),
            objects: (0..2).map(|o| wave(s * 20 + o + 5, dim)).collect(),
            scenes: (0..2).map(|k| wave(s * 30 + k + 9, dim)).collect(),
        })
        .collect()
}
