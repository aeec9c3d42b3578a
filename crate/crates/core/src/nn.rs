//! Reusable parameterized layers: linear, multi-head attention, transformer
//! encoder block, graph convolution, and the Adam optimizer.
//!
//! Layer functions take a [`Graph`] plus a [`Bound`] parameter binding and
//! return node ids, so the same parameter definitions serve training,
//! evaluation, and finite-difference checking.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Error;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

/// Fully connected layer: Glorot-uniform weight, zero-initialized bias.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LinearParams {
            weight: store.glorot(&format!("{name}.weight"), d_in, d_out, rng),
            bias: store.zeros(&format!("{name}.bias"), 1, d_out),
        }
    }
}

/// `x W + b` with the bias broadcast to every row.
pub fn linear<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    x: NodeId,
    p: &LinearParams,
) -> Result<NodeId> {
    let xw = g.matmul(x, bound.node(p.weight))?;
    g.broadcast_add_row(xw, bound.node(p.bias))
}

/// One transformer encoder block: Q/K/V/output projections for the attention,
/// a two-layer relu FFN at 4x width, and two layer-norm parameter pairs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub heads: usize,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl EncoderBlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads >= 1 && hidden % heads == 0, "{name}: heads must divide hidden size");
        let ffn_width = 4 * hidden;
        EncoderBlockParams {
            heads,
            wq: LinearParams::init(store, &format!("{name}.attn.q"), hidden, hidden, rng),
            wk: LinearParams::init(store, &format!("{name}.attn.k"), hidden, hidden, rng),
            wv: LinearParams::init(store, &format!("{name}.attn.v"), hidden, hidden, rng),
            wo: LinearParams::init(store, &format!("{name}.attn.out"), hidden, hidden, rng),
            ffn1: LinearParams::init(store, &format!("{name}.ffn.expand"), hidden, ffn_width, rng),
            ffn2: LinearParams::init(store, &format!("{name}.ffn.contract"), ffn_width, hidden, rng),
            ln1_gamma: store.ones(&format!("{name}.ln1.gamma"), 1, hidden),
            ln1_beta: store.zeros(&format!("{name}.ln1.beta"), 1, hidden),
            ln2_gamma: store.ones(&format!("{name}.ln2.gamma"), 1, hidden),
            ln2_beta: store.zeros(&format!("{name}.ln2.beta"), 1, hidden),
        }
    }
}

/// Scaled dot-product attention with per-head projections sliced out of full
/// width projections. `key_mask[k]` marks key/value row `k` as valid; masked
/// keys receive exactly zero attention weight. There are no positional
/// encodings: rows are treated as a set.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    key_mask: &[bool],
    p: &EncoderBlockParams,
) -> Result<NodeId> {
    let d = g.shape(q_in).cols;
    let n_q = g.shape(q_in).rows;
    let n_k = g.shape(k_in).rows;
    if g.shape(k_in).cols != d || g.shape(v_in).cols != d || g.shape(v_in).rows != n_k {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: (n_q, d),
            rhs: (g.shape(k_in).rows, g.shape(k_in).cols),
        });
    }
    if key_mask.len() != n_k {
        return Err(Error::InvalidMask {
            op: "multi_head_attention",
            detail: format!("key mask length {} != {} keys", key_mask.len(), n_k),
        });
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask {
            op: "multi_head_attention",
            detail: "all keys masked".into(),
        });
    }
    let head_dim = d / p.heads;
    let q_full = linear(g, bound, q_in, &p.wq)?;
    let k_full = linear(g, bound, k_in, &p.wk)?;
    let v_full = linear(g, bound, v_in, &p.wv)?;
    let scale = S::of(1.0 / (head_dim as f64).sqrt());
    // Valid-entry mask for the n_q x n_k score matrix: a column is live iff
    // its key is live, for every query row.
    let score_mask: Vec<bool> = (0..n_q)
        .flat_map(|_| key_mask.iter().copied())
        .collect();
    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q_h = g.slice_cols(q_full, h * head_dim, head_dim)?;
        let k_h = g.slice_cols(k_full, h * head_dim, head_dim)?;
        let v_h = g.slice_cols(v_full, h * head_dim, head_dim)?;
        let k_t = g.transpose(k_h)?;
        let scores = g.matmul(q_h, k_t)?;
        let scaled = g.scale(scores, scale)?;
        let weights = g.softmax_rows_masked(scaled, &score_mask)?;
        head_outputs.push(g.matmul(weights, v_h)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    linear(g, bound, concat, &p.wo)
}

/// Post-norm transformer encoder block:
/// `x' = LN(x + MHA(x, x, x))`, `out = LN(x' + FFN(x'))`, where the FFN is
/// `relu` between two linear layers with dropout after the activation.
pub fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    x: NodeId,
    key_mask: &[bool],
    p: &EncoderBlockParams,
) -> Result<NodeId> {
    let attn = multi_head_attention(g, bound, x, x, x, key_mask, p)?;
    let r1 = g.add(x, attn)?;
    let n1 = g.layer_norm(r1, bound.node(p.ln1_gamma), bound.node(p.ln1_beta))?;
    let expanded = linear(g, bound, n1, &p.ffn1)?;
    let activated = g.relu(expanded)?;
    let dropped = g.dropout(activated)?;
    let contracted = linear(g, bound, dropped, &p.ffn2)?;
    let r2 = g.add(n1, contracted)?;
    g.layer_norm(r2, bound.node(p.ln2_gamma), bound.node(p.ln2_beta))
}

/// Verify a normalized adjacency is square, symmetric, and finite, then add
/// it to the graph as a constant. Shared by graph-convolution call sites.
pub fn adjacency_constant<S: Scalar>(
    g: &mut Graph<S>,
    a_hat: &[S],
    n: usize,
) -> Result<NodeId> {
    if a_hat.len() != n * n {
        return Err(Error::contract(format!(
            "adjacency: {} entries for {n} nodes",
            a_hat.len()
        )));
    }
    for i in 0..n {
        for j in 0..i {
            let diff = (a_hat[i * n + j] - a_hat[j * n + i]).abs();
            if diff > S::of(1e-9) {
                return Err(Error::contract(format!(
                    "adjacency not symmetric at ({i},{j}): {} vs {}",
                    a_hat[i * n + j],
                    a_hat[j * n + i]
                )));
            }
        }
        for j in 0..n {
            if !a_hat[i * n + j].is_finite() {
                return Err(Error::contract(format!("adjacency entry ({i},{j}) not finite")));
            }
        }
    }
    Ok(g.constant(crate::autodiff::Shape::of(n, n), a_hat.to_vec()))
}

/// One graph convolution: `relu(A_hat * H * W)`.
pub fn gcn_layer<S: Scalar>(
    g: &mut Graph<S>,
    h: NodeId,
    a_hat: NodeId,
    w: NodeId,
) -> Result<NodeId> {
    let ah = g.matmul(a_hat, h)?;
    let ahw = g.matmul(ah, w)?;
    g.relu(ahw)
}

/// Adam optimizer state: first/second moments per parameter plus the step
/// counter. Moments are held at 64-bit regardless of the parameter scalar so
/// checkpointed state round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.rows * p.cols])
            .collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update over every parameter in the store.
    /// `grads` must hold exactly one gradient array per parameter, shaped
    /// like it, in registration order.
    pub fn step<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Vec<S>],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "adam_step: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.iter().enumerate() {
            let expected = store.shape(*id).len();
            if grads[i].len() != expected {
                return Err(Error::contract(format!(
                    "adam_step: gradient {i} has {} entries, parameter '{}' has {expected}",
                    grads[i].len(),
                    store.name(*id)
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, id) in ids.iter().enumerate() {
            let data = store.data_mut(*id);
            for (j, p) in data.iter_mut().enumerate() {
                let grad = grads[i][j].f64();
                let m = beta1 * self.m[i][j] + (1.0 - beta1) * grad;
                let v = beta2 * self.v[i][j] + (1.0 - beta2) * grad * grad;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p = S::of(p.f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use rand::SeedableRng;

    fn store_and_rng() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(42))
    }

    #[test]
    fn linear_zero_input_yields_bias_rows() {
        let (mut store, mut rng) = store_and_rng();
        let p = LinearParams::init(&mut store, "lin", 3, 2, &mut rng);
        store.data_mut(p.bias).copy_from_slice(&[0.5, -1.5]);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, 3), vec![0.0; 6]);
        let y = linear(&mut g, &bound, x, &p).unwrap();
        assert_eq!(g.data(y), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let (mut store, mut rng) = store_and_rng();
        let p = LinearParams::init(&mut store, "lin", 3, 3, &mut rng);
        let w = store.data_mut(p.weight);
        w.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, 3), vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let y = linear(&mut g, &bound, x, &p).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn linear_matches_brute_force_product() {
        // [DERIVED] explicit loop oracle over the same weights.
        let (mut store, mut rng) = store_and_rng();
        let p = LinearParams::init(&mut store, "lin", 4, 3, &mut rng);
        let x_data = vec![0.3, -1.1, 0.7, 2.2, -0.4, 0.9, 1.5, -2.0];
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, 4), x_data.clone());
        let y = linear(&mut g, &bound, x, &p).unwrap();

        let w = store.data(p.weight);
        let b = store.data(p.bias);
        for i in 0..2 {
            for j in 0..3 {
                let mut expect = b[j];
                for k in 0..4 {
                    expect += x_data[i * 4 + k] * w[k * 3 + j];
                }
                assert!((g.data(y)[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_over_single_key_returns_its_value_projection() {
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let q = g.constant(Shape::of(3, 4), vec![0.1; 12]);
        let kv = g.constant(Shape::of(1, 4), vec![0.2, -0.3, 0.5, 0.7]);
        let y = multi_head_attention(&mut g, &bound, q, kv, kv, &[true], &p).unwrap();

        // Softmax over one key is 1, so every output row is wo(wv(kv)).
        let v_proj = linear(&mut g, &bound, kv, &p.wv).unwrap();
        let expect = linear(&mut g, &bound, v_proj, &p.wo).unwrap();
        for row in 0..3 {
            for c in 0..4 {
                assert!((g.data(y)[row * 4 + c] - g.data(expect)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_with_identical_keys_ignores_query_values() {
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let kv = g.constant(Shape::of(3, 4), vec![0.2, -0.3, 0.5, 0.7].repeat(3));
        let q1 = g.constant(Shape::of(2, 4), vec![5.0, -1.0, 2.0, 0.0, -3.0, 4.0, 1.0, 2.0]);
        let q2 = g.constant(Shape::of(2, 4), vec![0.0, 9.0, -2.0, 1.0, 7.0, -5.0, 0.5, 3.0]);
        let mask = [true, true, true];
        let y1 = multi_head_attention(&mut g, &bound, q1, kv, kv, &mask, &p).unwrap();
        let y2 = multi_head_attention(&mut g, &bound, q2, kv, kv, &mask, &p).unwrap();
        for (a, b) in g.data(y1).iter().zip(g.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_enumeration() {
        // [DERIVED] 2-token, 2-head case recomputed with explicit loops over
        // the same projection matrices.
        let (mut store, mut rng) = store_and_rng();
        let d = 4;
        let heads = 2;
        let hd = d / heads;
        let p = EncoderBlockParams::init(&mut store, "blk", d, heads, &mut rng);
        let x_data = vec![0.3, -1.1, 0.7, 2.2, -0.4, 0.9, 1.5, -2.0];
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, d), x_data.clone());
        let y = multi_head_attention(&mut g, &bound, x, x, x, &[true, true], &p).unwrap();

        let project = |w: ParamId, b: ParamId| -> Vec<f64> {
            let w = store.data(w);
            let b = store.data(b);
            let mut out = vec![0.0; 2 * d];
            for i in 0..2 {
                for j in 0..d {
                    out[i * d + j] = b[j];
                    for k in 0..d {
                        out[i * d + j] += x_data[i * d + k] * w[k * d + j];
                    }
                }
            }
            out
        };
        let q = project(p.wq.weight, p.wq.bias);
        let k = project(p.wk.weight, p.wk.bias);
        let v = project(p.wv.weight, p.wv.bias);
        let mut concat = vec![0.0; 2 * d];
        for h in 0..heads {
            for i in 0..2 {
                let mut scores = [0.0f64; 2];
                for jj in 0..2 {
                    for c in 0..hd {
                        scores[jj] += q[i * d + h * hd + c] * k[jj * d + h * hd + c];
                    }
                    scores[jj] /= (hd as f64).sqrt();
                }
                let max = scores[0].max(scores[1]);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for jj in 0..2 {
                        acc += e[jj] / z * v[jj * d + h * hd + c];
                    }
                    concat[i * d + h * hd + c] = acc;
                }
            }
        }
        let wo = store.data(p.wo.weight);
        let bo = store.data(p.wo.bias);
        for i in 0..2 {
            for j in 0..d {
                let mut expect = bo[j];
                for kk in 0..d {
                    expect += concat[i * d + kk] * wo[kk * d + j];
                }
                assert!(
                    (g.data(y)[i * d + j] - expect).abs() < 1e-12,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn attention_rejects_fully_masked_keys() {
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, 4), vec![0.1; 8]);
        assert!(matches!(
            multi_head_attention(&mut g, &bound, x, x, x, &[false, false], &p),
            Err(Error::InvalidMask { .. })
        ));
    }

    #[test]
    fn encoder_block_preserves_shape() {
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 8, 2, &mut rng);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(5, 8), (0..40).map(|i| (i as f64) * 0.1 - 2.0).collect());
        let y = encoder_block(&mut g, &bound, x, &[true; 5], &p).unwrap();
        assert_eq!(g.shape(y), Shape::of(5, 8));
    }

    #[test]
    fn encoder_block_is_permutation_equivariant() {
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        let rows: Vec<Vec<f64>> = vec![
            vec![0.3, -1.1, 0.7, 2.2],
            vec![-0.4, 0.9, 1.5, -2.0],
            vec![1.2, 0.1, -0.8, 0.5],
        ];
        let perm = [2usize, 0, 1];

        let run = |order: &[usize], store: &ParamStore<f64>| -> Vec<f64> {
            let mut g = Graph::eval();
            let bound = store.bind(&mut g);
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let x = g.constant(Shape::of(3, 4), data);
            let y = encoder_block(&mut g, &bound, x, &[true; 3], &p).unwrap();
            g.data(y).to_vec()
        };
        let base = run(&[0, 1, 2], &store);
        let permuted = run(&perm, &store);
        for (out_row, &in_row) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((permuted[out_row * 4 + c] - base[in_row * 4 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_block_matches_step_by_step_composition() {
        // [DERIVED] tiny case recomputed by composing the layer calls the
        // block is defined from.
        let (mut store, mut rng) = store_and_rng();
        let p = EncoderBlockParams::init(&mut store, "blk", 4, 2, &mut rng);
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let x = g.constant(Shape::of(2, 4), vec![0.3, -1.1, 0.7, 2.2, -0.4, 0.9, 1.5, -2.0]);
        let mask = [true, true];
        let y = encoder_block(&mut g, &bound, x, &mask, &p).unwrap();

        let attn = multi_head_attention(&mut g, &bound, x, x, x, &mask, &p).unwrap();
        let r1 = g.add(x, attn).unwrap();
        let n1 = g.layer_norm(r1, bound.node(p.ln1_gamma), bound.node(p.ln1_beta)).unwrap();
        let e = linear(&mut g, &bound, n1, &p.ffn1).unwrap();
        let a = g.relu(e).unwrap();
        let c = linear(&mut g, &bound, a, &p.ffn2).unwrap();
        let r2 = g.add(n1, c).unwrap();
        let expect = g
            .layer_norm(r2, bound.node(p.ln2_gamma), bound.node(p.ln2_beta))
            .unwrap();
        assert_eq!(g.data(y), g.data(expect));
    }

    #[test]
    fn gcn_single_node_self_loop() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Shape::of(1, 2), vec![2.0, -3.0]);
        let a = adjacency_constant(&mut g, &[1.0], 1).unwrap();
        let w = g.constant(Shape::of(2, 2), vec![1.0, 1.0, 1.0, 0.0]);
        let y = gcn_layer(&mut g, h, a, w).unwrap();
        // relu([2-3, 2+0]) = relu([-1, 2]) = [0, 2]
        assert_eq!(g.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn gcn_identity_everything_preserves_nonnegative_input() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Shape::of(2, 2), vec![1.0, 0.5, 2.0, 0.0]);
        let a = adjacency_constant(&mut g, &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let w = g.constant(Shape::of(2, 2), vec![1.0, 0.0, 0.0, 1.0]);
        let y = gcn_layer(&mut g, h, a, w).unwrap();
        assert_eq!(g.data(y), g.data(h));
    }

    #[test]
    fn gcn_matches_triple_product_oracle() {
        // [DERIVED] 3-node chain computed with explicit dense loops.
        let a_hat = [1.0, 0.4, 0.0, 0.4, 1.0, 0.6, 0.0, 0.6, 1.0];
        let h_data = [0.3, -1.1, 0.7, 2.2, -0.4, 0.9];
        let w_data = [0.5, -0.2, 1.1, 0.8];
        let mut g = Graph::<f64>::eval();
        let h = g.constant(Shape::of(3, 2), h_data.to_vec());
        let a = adjacency_constant(&mut g, &a_hat, 3).unwrap();
        let w = g.constant(Shape::of(2, 2), w_data.to_vec());
        let y = gcn_layer(&mut g, h, a, w).unwrap();

        let mut ah = [0.0f64; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..3 {
                    ah[i * 2 + j] += a_hat[i * 3 + k] * h_data[k * 2 + j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let mut v = 0.0;
                for k in 0..2 {
                    v += ah[i * 2 + k] * w_data[k * 2 + j];
                }
                let expect = v.max(0.0);
                assert!((g.data(y)[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_rejects_asymmetric_adjacency() {
        let mut g = Graph::<f64>::eval();
        let bad = [1.0, 0.3, 0.7, 1.0];
        assert!(matches!(
            adjacency_constant(&mut g, &bad, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store = ParamStore::<f64>::new();
        store.zeros("p", 1, 3);
        let mut state = AdamState::new(&store);
        let grads = vec![vec![1.0, 1.0, 1.0]];
        state
            .step(&mut store, &grads, 0.001, 0.9, 0.999, 1e-8)
            .unwrap();
        let id = store.find("p").unwrap();
        for &v in store.data(id) {
            assert!((v - (-0.001 / (1.0 + 1e-8))).abs() < 1e-12);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradients_fix_parameters_but_advance_the_counter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.ones("p", 1, 2);
        let before = store.data(id).to_vec();
        let mut state = AdamState::new(&store);
        state
            .step(&mut store, &[vec![0.0, 0.0]], 0.01, 0.9, 0.999, 1e-8)
            .unwrap();
        assert_eq!(store.data(id), &before[..]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_three_steps_match_scalar_recurrence() {
        // [DERIVED] independent scalar recurrence for gradient of x^2 at the
        // current iterate.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut store = ParamStore::<f64>::new();
        let id = store.ones("x", 1, 1);
        store.data_mut(id)[0] = 2.0;
        let mut state = AdamState::new(&store);

        let mut x_ref = 2.0f64;
        let (mut m_ref, mut v_ref) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * store.data(id)[0];
            state
                .step(&mut store, &[vec![g]], lr, b1, b2, eps)
                .unwrap();

            let g_ref = 2.0 * x_ref;
            m_ref = b1 * m_ref + (1.0 - b1) * g_ref;
            v_ref = b2 * v_ref + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m_ref / (1.0 - b1.powi(t));
            let v_hat = v_ref / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (store.data(id)[0] - x_ref).abs() < 1e-14,
                "step {t}: {} vs {x_ref}",
                store.data(id)[0]
            );
        }
    }

    #[test]
    fn adam_rejects_gradient_count_mismatch() {
        let mut store = ParamStore::<f64>::new();
        store.zeros("p", 1, 3);
        let mut state = AdamState::new(&store);
        assert!(matches!(
            state.step(&mut store, &[], 0.001, 0.9, 0.999, 1e-8),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn parameter_init_is_reproducible_from_the_seed() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let _ = EncoderBlockParams::init(&mut store, "blk", 8, 2, &mut rng);
            store.flatten()
        };
        assert_eq!(build(), build());
    }
}
