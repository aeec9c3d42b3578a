//! Batched evaluation: deterministic forward passes with the stored
//! similarity statistics, confusion counts, and averaged losses.

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{collate, FeatureBundle, NUM_CLASSES};
use crate::error::Error;
use crate::fusion::SimStats;
use crate::harness::forward;
use crate::loss;
use crate::metrics::{argmax, Metrics, MetricsBuilder};
use crate::model::ModelParams;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::semantic::ClassGraph;
use crate::Result;

/// Evaluate the model on a bundle list. Batches follow the configured batch
/// size, but predictions do not depend on the batching: gates draw on the
/// stored running statistics and padding is inert.
pub fn evaluate<S: Scalar>(
    cfg: &RunConfig,
    store: &ParamStore<S>,
    model: &ModelParams,
    class_graphs: &[ClassGraph; NUM_CLASSES],
    stats: &SimStats,
    bundles: &[FeatureBundle],
) -> Result<Metrics> {
    if bundles.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut builder = MetricsBuilder::new();
    for chunk in bundles.chunks(cfg.batch_size) {
        let batch = collate::<S>(chunk, cfg.scene_scales)?;
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let out = forward::forward_batch(&mut g, &bound, model, cfg, class_graphs, &batch, stats)?;
        let objective =
            loss::total_loss(&mut g, &out.group_logits, &out.cues, &batch.labels, out.alignment)?;
        builder.record_losses(&objective.report, batch.n);
        for (i, &label) in batch.labels.iter().enumerate() {
            let row: Vec<f64> = g.data(out.group_logits[i]).iter().map(|v| v.f64()).collect();
            builder.record(label, argmax(&row));
        }
    }
    Ok(builder.finish())
}

/// Predicted label for every bundle, in input order.
pub fn predictions<S: Scalar>(
    cfg: &RunConfig,
    store: &ParamStore<S>,
    model: &ModelParams,
    class_graphs: &[ClassGraph; NUM_CLASSES],
    stats: &SimStats,
    bundles: &[FeatureBundle],
) -> Result<Vec<u8>> {
    let mut preds = Vec::with_capacity(bundles.len());
    for chunk in bundles.chunks(cfg.batch_size.max(1)) {
        let batch = collate::<S>(chunk, cfg.scene_scales)?;
        let mut g = Graph::eval();
        let bound = store.bind(&mut g);
        let out = forward::forward_batch(&mut g, &bound, model, cfg, class_graphs, &batch, stats)?;
        for i in 0..batch.n {
            let row: Vec<f64> = g.data(out.group_logits[i]).iter().map(|v| v.f64()).collect();
            preds.push(argmax(&row));
        }
    }
    Ok(preds)
}
