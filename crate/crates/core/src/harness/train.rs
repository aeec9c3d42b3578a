//! Deterministic training loop: seeded shuffling, per-step dropout streams,
//! Adam updates, decaying learning rate, divergence detection, epoch logs,
//! and checkpointing.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::checkpoint::{self, Checkpoint};
use crate::data::lexicon::LexiconSet;
use crate::data::{collate, FeatureBundle};
use crate::error::Error;
use crate::fusion::{batch_moments, SimStats};
use crate::harness::{eval, forward, mix2, mix3};
use crate::loss::{self, LossReport};
use crate::metrics::{argmax, Metrics};
use crate::model::ModelParams;
use crate::nn::AdamState;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::semantic::build_class_graphs;
use crate::Result;

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossReport,
    pub train_acc: f64,
}

/// Final state of a training run, with everything needed to evaluate or
/// checkpoint the model afterwards.
pub struct TrainOutcome<S: Scalar> {
    pub epochs: Vec<EpochLog>,
    pub store: ParamStore<S>,
    pub model: ModelParams,
    pub stats: SimStats,
    pub final_checkpoint: Checkpoint,
    /// Best epoch by selection accuracy, with its metrics, when a selection
    /// split was supplied.
    pub best: Option<(usize, Metrics)>,
}

/// Train the configured variant. `selection_bundles`, when given, are
/// evaluated after every epoch to track the best checkpoint. `resume`
/// continues from a checkpoint's completed-epoch boundary; the shuffle,
/// dropout, and learning-rate streams are derived from (seed, epoch, step)
/// counters, so a resumed run reproduces the uninterrupted one exactly.
/// With `out_dir` set, epoch lines append to `train_log.jsonl` and
/// checkpoints land in `checkpoint_final.json` / `checkpoint_best.json`.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    train_bundles: &[FeatureBundle],
    selection_bundles: Option<&[FeatureBundle]>,
    lexicons: &LexiconSet,
    resume: Option<&Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_bundles.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if lexicons.dim != cfg.embed_dim {
        return Err(Error::contract(format!(
            "lexicon embeddings are {}-dimensional, configuration expects {}",
            lexicons.dim, cfg.embed_dim
        )));
    }
    let class_graphs = build_class_graphs(lexicons)?;
    let (mut store, model) = ModelParams::init::<S>(cfg);
    let mut adam = AdamState::new(&store);
    let mut stats = SimStats::new(0.9);
    let mut start_epoch = 0usize;
    if let Some(ckpt) = resume {
        checkpoint::apply(ckpt, &mut store, &mut adam)?;
        stats = ckpt.sim_stats.clone();
        start_epoch = ckpt.epoch;
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };

    let n = train_bundles.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Metrics)> = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sums = LossReport::default();
        let mut weighted = 0usize;
        let mut correct = 0usize;
        let mut lr_used = cfg.lr_at(epoch, epoch * steps_per_epoch);

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let members: Vec<FeatureBundle> =
                chunk.iter().map(|&i| train_bundles[i].clone()).collect();
            let batch = collate::<S>(&members, cfg.scene_scales)?;
            let mut g = Graph::train(cfg.dropout, mix3(cfg.seed, epoch as u64, step as u64));
            let bound = store.bind(&mut g);
            let out =
                forward::forward_batch(&mut g, &bound, &model, cfg, &class_graphs, &batch, &stats)?;
            let objective =
                loss::total_loss(&mut g, &out.group_logits, &out.cues, &batch.labels, out.alignment)?;
            if !objective.report.l_total.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: objective.report.l_total });
            }
            g.backward(objective.total)?;
            let grads = store.collect_grads(&g, &bound);
            let global_step = epoch * steps_per_epoch + step;
            lr_used = cfg.lr_at(epoch, global_step);
            adam.step(&mut store, &grads, lr_used, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
            if !out.sims.is_empty() {
                let (mean, std) = batch_moments(&out.sims);
                stats.update(mean, std);
            }

            let bn = batch.n;
            for (i, &label) in batch.labels.iter().enumerate() {
                let row: Vec<f64> =
                    g.data(out.group_logits[i]).iter().map(|v| v.f64()).collect();
                if argmax(&row) == label {
                    correct += 1;
                }
            }
            sums.l_group += objective.report.l_group * bn as f64;
            sums.l_s += objective.report.l_s * bn as f64;
            sums.l_f += objective.report.l_f * bn as f64;
            sums.l_o += objective.report.l_o * bn as f64;
            sums.l_sam += objective.report.l_sam * bn as f64;
            weighted += bn;
        }

        let inv = 1.0 / weighted as f64;
        let losses = {
            let l_group = sums.l_group * inv;
            let l_s = sums.l_s * inv;
            let l_f = sums.l_f * inv;
            let l_o = sums.l_o * inv;
            let l_sam = sums.l_sam * inv;
            LossReport { l_group, l_s, l_f, l_o, l_sam, l_total: l_group + l_s + l_f + l_o + l_sam }
        };
        let line = EpochLog {
            epoch,
            lr: lr_used,
            losses,
            train_acc: correct as f64 / weighted as f64,
        };
        log::info!(
            "epoch {} lr {:.6} total {:.4} train_acc {:.4}",
            line.epoch,
            line.lr,
            line.losses.l_total,
            line.train_acc
        );
        if let Some(f) = log_file.as_mut() {
            let text = serde_json::to_string(&line)
                .map_err(|e| Error::contract(format!("cannot serialize epoch log: {e}")))?;
            writeln!(f, "{text}")
                .map_err(|e| Error::io(out_dir.expect("out dir"), e))?;
        }
        epochs.push(line);

        if let Some(bundles) = selection_bundles {
            let metrics = eval::evaluate(cfg, &store, &model, &class_graphs, &stats, bundles)?;
            let improved = match &best {
                None => true,
                Some((_, prev)) => {
                    metrics.overall > prev.overall
                        || (metrics.overall == prev.overall
                            && metrics.losses.l_total < prev.losses.l_total)
                }
            };
            if improved {
                best = Some((epoch, metrics));
                if let Some(dir) = out_dir {
                    let snap = checkpoint::snapshot(cfg, &store, &adam, &stats, epoch + 1);
                    checkpoint::save(&dir.join("checkpoint_best.json"), &snap)?;
                }
            }
        }
    }

    let final_epoch = cfg.epochs.max(start_epoch);
    let final_checkpoint = checkpoint::snapshot(cfg, &store, &adam, &stats, final_epoch);
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("checkpoint_final.json"), &final_checkpoint)?;
    }
    Ok(TrainOutcome { epochs, store, model, stats, final_checkpoint, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::harness::forward::tests::{micro_bundles, micro_config, micro_lexicons};

    fn training_fixture() -> (RunConfig, Vec<FeatureBundle>, LexiconSet) {
        let mut cfg = micro_config();
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.dropout = 0.1;
        let mut bundles = micro_bundles(cfg.hidden);
        // A third sample so the last batch is ragged.
        let mut extra = bundles[0].clone();
        extra.id = "micro_2".into();
        extra.label = 2;
        bundles.push(extra);
        (cfg.clone(), bundles, micro_lexicons(cfg.embed_dim))
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let (cfg, bundles, lex) = training_fixture();
        let a = train::<f32>(&cfg, &bundles, None, &lex, None, None).unwrap();
        let b = train::<f32>(&cfg, &bundles, None, &lex, None, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.data, pb.data, "parameter {}", pa.name);
        }
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
    }

    #[test]
    fn resume_matches_the_uninterrupted_run_step_for_step() {
        let (mut cfg, bundles, lex) = training_fixture();
        cfg.epochs = 4;
        let full = train::<f32>(&cfg, &bundles, None, &lex, None, None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.epochs = 2;
        let half = train::<f32>(&half_cfg, &bundles, None, &lex, None, None).unwrap();
        let resumed =
            train::<f32>(&cfg, &bundles, None, &lex, Some(&half.final_checkpoint), None).unwrap();

        assert_eq!(resumed.epochs, full.epochs[2..].to_vec());
        for ((_, pa), (_, pb)) in full.store.iter().zip(resumed.store.iter()) {
            assert_eq!(pa.data, pb.data, "parameter {}", pa.name);
        }
        assert_eq!(full.final_checkpoint, resumed.final_checkpoint);
    }

    #[test]
    fn baseline_variant_trains_and_logs_every_epoch() {
        let (mut cfg, bundles, lex) = training_fixture();
        cfg.variant = Variant::B1;
        let out = train::<f32>(&cfg, &bundles, Some(&bundles), &lex, None, None).unwrap();
        assert_eq!(out.epochs.len(), 2);
        assert!(out.best.is_some());
        for line in &out.epochs {
            assert!(line.losses.l_total.is_finite());
            assert_eq!(
                line.losses.l_total,
                line.losses.l_group
                    + line.losses.l_s
                    + line.losses.l_f
                    + line.losses.l_o
                    + line.losses.l_sam
            );
        }
    }

    #[test]
    fn log_file_receives_one_line_per_epoch() {
        let (cfg, bundles, lex) = training_fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = train::<f32>(&cfg, &bundles, None, &lex, None, Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: EpochLog = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed, out.epochs[0]);
        assert!(dir.path().join("checkpoint_final.json").exists());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let (cfg, _, lex) = training_fixture();
        assert!(matches!(
            train::<f32>(&cfg, &[], None, &lex, None, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lexicon_width_mismatch_is_rejected() {
        let (cfg, bundles, _) = training_fixture();
        let wrong = micro_lexicons(cfg.embed_dim + 1);
        assert!(matches!(
            train::<f32>(&cfg, &bundles, None, &wrong, None, None),
            Err(Error::Contract(_))
        ));
    }
}
