//! Interactive fusion of the visual and semantic representations: cosine
//! similarity between projected branches, batch-standardized sigmoid gating,
//! and a small encoder over the fused two-token sequence.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::Error;
use crate::nn::{self, EncoderBlockParams, LinearParams};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

/// Trainable parameters of the fusion stage. The semantic side arrives
/// already projected by the semantic branch's head; only the visual side
/// needs its own projection here.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub visual_proj: LinearParams,
    pub group: Vec<EncoderBlockParams>,
    pub group_head: LinearParams,
}

impl FusionParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        hidden: usize,
        heads: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FusionParams {
            visual_proj: LinearParams::init(store, &format!("{name}.visual_proj"), hidden, hidden, rng),
            group: (0..depth)
                .map(|i| EncoderBlockParams::init(store, &format!("{name}.group{i}"), hidden, heads, rng))
                .collect(),
            group_head: LinearParams::init(store, &format!("{name}.group_head"), hidden, 3, rng),
        }
    }
}

/// Running mean and standard deviation of the visual/semantic cosine
/// similarity, kept for standardizing single samples and evaluation
/// batches. The first observed batch replaces the defaults; later batches
/// blend in with exponential smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub mean: f64,
    pub std: f64,
    pub momentum: f64,
    pub count: u64,
}

impl SimStats {
    pub fn new(momentum: f64) -> Self {
        SimStats { mean: 0.0, std: 1.0, momentum, count: 0 }
    }

    pub fn update(&mut self, batch_mean: f64, batch_std: f64) {
        if self.count == 0 {
            self.mean = batch_mean;
            self.std = batch_std;
        } else {
            let m = self.momentum;
            self.mean = m * self.mean + (1.0 - m) * batch_mean;
            self.std = m * self.std + (1.0 - m) * batch_std;
        }
        self.count += 1;
    }
}

/// Population mean and standard deviation of raw similarity values, for
/// feeding [`SimStats::update`].
pub fn batch_moments(sims: &[f64]) -> (f64, f64) {
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardize each similarity and squash it to a gate in `(0, 1)`.
///
/// With two or more samples in train mode the mean and deviation are batch
/// statistics built inside the graph, so gradients flow through the
/// standardization itself. Otherwise the stored running statistics enter as
/// constants; the gradient still flows through the similarity value.
pub fn standardized_gates<S: Scalar>(
    g: &mut Graph<S>,
    sims: &[NodeId],
    stats: &SimStats,
) -> Result<Vec<NodeId>> {
    if sims.is_empty() {
        return Err(Error::contract("standardized_gates: no similarities"));
    }
    for &s in sims {
        if !g.shape(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "standardized_gates",
                lhs: g.shape(s).pair(),
                rhs: (1, 1),
            });
        }
    }
    let n = sims.len();
    let mut gates = Vec::with_capacity(n);
    if g.is_training() && n >= 2 {
        let stack = g.concat_rows(sims)?;
        let mu = g.mean_rows(stack)?;
        let neg_mu = g.scale(mu, S::of(-1.0))?;
        let centered = g.broadcast_add_row(stack, neg_mu)?;
        let squared = g.mul(centered, centered)?;
        let var = g.mean_rows(squared)?;
        let sigma = g.sqrt(var)?;
        let denom = g.add_const(sigma, S::of(1e-8))?;
        let inv = g.recip(denom)?;
        let z_all = g.scale_by(centered, inv)?;
        for i in 0..n {
            let z = g.slice_rows(z_all, i, 1)?;
            gates.push(g.sigmoid(z)?);
        }
    } else {
        let shift = S::of(-stats.mean);
        let inv = S::of(1.0 / (stats.std + 1e-8));
        for &s in sims {
            let centered = g.add_const(s, shift)?;
            let z = g.scale(centered, inv)?;
            gates.push(g.sigmoid(z)?);
        }
    }
    Ok(gates)
}

/// Two-token fused sequence for one sample: `[projected visual; semantic]`,
/// both rows scaled by the gate when one is supplied.
pub fn fused_tokens<S: Scalar>(
    g: &mut Graph<S>,
    proj_visual: NodeId,
    semantic: NodeId,
    gate: Option<NodeId>,
) -> Result<NodeId> {
    let tokens = g.concat_rows(&[proj_visual, semantic])?;
    match gate {
        Some(gate) => g.scale_by(tokens, gate),
        None => Ok(tokens),
    }
}

/// Encode the fused two-token sequence and classify the pooled result.
/// Returns the pooled group representation and the class logits.
pub fn group_encode<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    fused: NodeId,
    p: &FusionParams,
) -> Result<(NodeId, NodeId)> {
    if g.shape(fused).rows != 2 {
        return Err(Error::ShapeMismatch {
            op: "group_encode",
            lhs: g.shape(fused).pair(),
            rhs: (2, g.shape(fused).cols),
        });
    }
    let mask = [true, true];
    let mut x = fused;
    for block in &p.group {
        x = nn::encoder_block(g, bound, x, &mask, block)?;
    }
    let pooled = g.mean_rows(x)?;
    let logits = nn::linear(g, bound, pooled, &p.group_head)?;
    Ok((pooled, logits))
}
