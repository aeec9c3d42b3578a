//! Ablation driver: train every variant from the same seed and data, then
//! tabulate per-class and overall accuracy.

use crate::config::{RunConfig, Variant};
use crate::data::lexicon::LexiconSet;
use crate::data::FeatureBundle;
use crate::harness::{eval, train};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// Per-class accuracies in class order, then overall, all in percent.
    pub pos: f64,
    pub neu: f64,
    pub neg: f64,
    pub overall: f64,
}

/// Train and evaluate all seven variants with identical data and seed.
/// Rows come back in ladder order; no ordering among their scores is
/// implied or checked.
pub fn run_ablation<S: Scalar>(
    base: &RunConfig,
    train_bundles: &[FeatureBundle],
    eval_bundles: &[FeatureBundle],
    lexicons: &LexiconSet,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.variant = variant;
        log::info!("ablation: training {}", variant.key());
        let outcome = train::train::<S>(&cfg, train_bundles, None, lexicons, None, None)?;
        let class_graphs = crate::semantic::build_class_graphs(lexicons)?;
        let metrics = eval::evaluate(
            &cfg,
            &outcome.store,
            &outcome.model,
            &class_graphs,
            &outcome.stats,
            eval_bundles,
        )?;
        rows.push(AblationRow {
            label: variant.display_label().to_string(),
            pos: 100.0 * metrics.per_class[0],
            neu: 100.0 * metrics.per_class[1],
            neg: 100.0 * metrics.per_class[2],
            overall: 100.0 * metrics.overall,
        });
    }
    Ok(rows)
}

/// Render rows as CSV with a fixed header and two-decimal percentages.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,pos,neu,neg,overall\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.2},{:.2},{:.2},{:.2}\n",
            row.label, row.pos, row.neu, row.neg, row.overall
        ));
    }
    out
}
