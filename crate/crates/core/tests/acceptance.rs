//! Release gate: every acceptance criterion as one test that prints a
//! single PASS/FAIL line (visible under `--nocapture`; assertion messages
//! carry the same detail on failure).
//!
//! Criteria: (1) finite-difference verification of all gradients, from
//! primitives to the full model; (2) pinned analytic anchor values;
//! (3) structural invariants; (4) end-to-end learning on the bundled
//! synthetic generator with the shipped lexicons; (5) the complete
//! ablation grid; (6) lossless checkpointing and exact resume.

use std::path::PathBuf;
use std::time::Instant;

use gan_core::autodiff::{Graph, Shape};
use gan_core::config::{RunConfig, Variant};
use gan_core::data::lexicon::{hash_embedding, LexiconClass, LexiconEntry, LexiconSet};
use gan_core::data::synth::{generate_bundles, SyntheticSpec};
use gan_core::data::{checkpoint, FeatureBundle};
use gan_core::fusion::{standardized_gates, SimStats};
use gan_core::harness::{ablate, eval, gradcheck, train};
use gan_core::loss::{ground_truth_distribution, match_probabilities};
use gan_core::model::ModelParams;
use gan_core::semantic::build_class_graphs;
use gan_core::visual;

fn wave(seed: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| ((seed * 31 + i * 7) % 13) as f64 / 13.0 - 0.4).collect()
}

fn micro_lexicons(dim: usize) -> LexiconSet {
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

fn micro_bundles(dim: usize) -> Vec<FeatureBundle> {
    (0..2)
        .map(|s| FeatureBundle {
            id: format!("micro_{s}"),
            label: s as u8,
            faces: (0..2).map(|f| wave(s * 10 + f, dim)).collect(),
            objects: (0..2).map(|o| wave(s * 20 + o + 5, dim)).collect(),
            scenes: (0..2).map(|k| wave(s * 30 + k + 9, dim)).collect(),
        })
        .collect()
}

fn micro_config() -> RunConfig {
    RunConfig {
        hidden: 6,
        heads: 2,
        fusion_depth: 2,
        scene_scales: 2,
        embed_dim: 5,
        batch_size: 2,
        seed: 42,
        variant: Variant::B4,
        ..RunConfig::default()
    }
}

fn shipped_lexicons(dim: usize) -> LexiconSet {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/lexicons.json");
    gan_core::data::lexicon::load_lexicons(&path, dim).expect("shipped lexicon asset loads")
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let report = gradcheck::run_suite().expect("gradient suite runs");
    print!("{}", report.render());
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "gradient suite took {elapsed:?}, budget is 120 s"
    );
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0f64, f64::max);
    assert!(report.all_pass, "gradient check failures:\n{}", report.render());
    println!(
        "PASS criterion 1: {} gradient checks within 1e-4 of central differences (worst {worst:.3e}, {elapsed:.2?})",
        report.entries.len()
    );
}

#[test]
fn criterion_2_analytic_anchor_values() {
    // Two perfectly-separated samples with unequal labels, unit temperature,
    // no stabilizer: the alignment objective has a closed form,
    // 2 * ln(1 + e^-1).
    let mut g: Graph<f64> = Graph::eval();
    let e1 = g.constant(Shape::of(1, 2), vec![1.0, 0.0]);
    let e2 = g.constant(Shape::of(1, 2), vec![0.0, 1.0]);
    let loss = gan_core::loss::alignment_loss(&mut g, &[e1, e2], &[e1, e2], &[0, 1], 1.0, 0.0, false)
        .expect("alignment loss builds");
    let worked = 0.6265233750364456;
    let got = g.value(loss);
    assert!(
        (got - worked).abs() < 1e-5,
        "alignment anchor: got {got}, want {worked}"
    );

    // Uniform logits: cross-entropy is exactly ln 3 regardless of the label.
    let mut g: Graph<f64> = Graph::eval();
    let logits = g.constant(Shape::of(1, 3), vec![0.25, 0.25, 0.25]);
    let ln3 = 3.0f64.ln();
    for label in 0..3u8 {
        let ce = gan_core::loss::cross_entropy(&mut g, logits, label).unwrap();
        assert!(
            (g.value(ce) - ln3).abs() < 1e-9,
            "uniform cross-entropy for label {label}: {}",
            g.value(ce)
        );
    }

    // Every logged step: the reported total must equal the sum of its parts.
    let cfg = RunConfig { epochs: 2, ..micro_config() };
    let lex = micro_lexicons(cfg.embed_dim);
    let bundles = micro_bundles(cfg.hidden);
    let out = train::train::<f64>(&cfg, &bundles, None, &lex, None, None).unwrap();
    assert_eq!(out.epochs.len(), 2);
    for log in &out.epochs {
        let l = &log.losses;
        let sum = l.l_group + l.l_s + l.l_f + l.l_o + l.l_sam;
        assert!(
            (l.l_total - sum).abs() < 1e-6,
            "epoch {}: total {} != sum of parts {}",
            log.epoch,
            l.l_total,
            sum
        );
    }
    println!(
        "PASS criterion 2: alignment anchor {worked} within 1e-5, uniform cross-entropy ln 3 within 1e-9, totals additive within 1e-6"
    );
}

#[test]
fn criterion_3_structural_invariants() {
    // Match distributions and agreement targets are row-stochastic.
    let mut g: Graph<f64> = Graph::eval();
    let sim = g.constant(Shape::of(3, 3), wave(3, 9));
    let p = match_probabilities(&mut g, sim, 0.02, false).unwrap();
    for row in 0..3 {
        let sum: f64 = g.data(p)[row * 3..(row + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "match row {row} sums to {sum}");
    }
    let q = ground_truth_distribution(&[0, 1, 0]);
    for row in 0..3 {
        let sum: f64 = q[row * 3..(row + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "target row {row} sums to {sum}");
    }

    // Softmax is invariant to shifting every logit by a constant.
    let mut g: Graph<f64> = Graph::eval();
    let x = g.constant(Shape::of(1, 4), vec![0.2, -1.4, 3.0, 0.7]);
    let shifted = g.add_const(x, 123.456).unwrap();
    let a = g.softmax_rows(x).unwrap();
    let b = g.softmax_rows(shifted).unwrap();
    for (u, v) in g.data(a).to_vec().iter().zip(g.data(b)) {
        assert!((u - v).abs() < 1e-6, "softmax shift moved {u} to {v}");
    }

    // The pooled visual representation ignores the order of faces and of
    // objects (no positional encodings anywhere in the stack).
    let cfg = micro_config();
    let (store, params) = ModelParams::init::<f64>(&cfg);
    let run = |face_order: [usize; 2], object_order: [usize; 2]| -> Vec<f64> {
        let mut g: Graph<f64> = Graph::eval();
        let bound = store.bind(&mut g);
        let faces_rows = [wave(1, cfg.hidden), wave(2, cfg.hidden)];
        let object_rows = [wave(3, cfg.hidden), wave(4, cfg.hidden)];
        let mut face_data = Vec::new();
        for &i in &face_order {
            face_data.extend_from_slice(&faces_rows[i]);
        }
        let mut object_data = Vec::new();
        for &i in &object_order {
            object_data.extend_from_slice(&object_rows[i]);
        }
        let faces = g.constant(Shape::of(2, cfg.hidden), face_data);
        let objects = g.constant(Shape::of(2, cfg.hidden), object_data);
        let scenes = g.constant(
            Shape::of(cfg.scene_scales, cfg.hidden),
            wave(5, cfg.scene_scales * cfg.hidden),
        );
        let f_v = visual::context_encode(
            &mut g,
            &bound,
            faces,
            &[true, true],
            scenes,
            Some((objects, &[true, true])),
            &params.visual,
            cfg.gate_per_scale,
        )
        .unwrap();
        g.data(f_v).to_vec()
    };
    let base = run([0, 1], [0, 1]);
    let permuted = run([1, 0], [1, 0]);
    for (u, v) in base.iter().zip(&permuted) {
        assert!((u - v).abs() < 1e-5, "permuting inputs moved {u} to {v}");
    }

    // Predictions are independent of how the evaluation set is batched.
    let lex = micro_lexicons(cfg.embed_dim);
    let class_graphs = build_class_graphs(&lex).unwrap();
    let mut bundles = micro_bundles(cfg.hidden);
    bundles.extend(micro_bundles(cfg.hidden).into_iter().map(|mut b| {
        b.id.push_str("_alt");
        b.faces.pop();
        b.label = 2;
        b
    }));
    let mut stats = SimStats::new(0.9);
    stats.update(0.3, 0.2);
    let one = RunConfig { batch_size: 1, ..cfg.clone() };
    let four = RunConfig { batch_size: 4, ..cfg.clone() };
    let p1 = eval::predictions::<f64>(&one, &store, &params, &class_graphs, &stats, &bundles).unwrap();
    let p4 = eval::predictions::<f64>(&four, &store, &params, &class_graphs, &stats, &bundles).unwrap();
    assert_eq!(p1, p4, "batch size changed predictions");

    // Similarity gates stay strictly inside (0, 1) on both statistic paths.
    let mut g: Graph<f64> = Graph::train(0.0, 3);
    let sims: Vec<_> = [0.1, 0.9, -0.4, 0.5]
        .iter()
        .map(|&v| g.constant(Shape::of(1, 1), vec![v]))
        .collect();
    let gates = standardized_gates(&mut g, &sims, &stats).unwrap();
    let mut g_eval: Graph<f64> = Graph::eval();
    let sims_eval: Vec<_> = [0.1, 0.9, -0.4, 0.5]
        .iter()
        .map(|&v| g_eval.constant(Shape::of(1, 1), vec![v]))
        .collect();
    let gates_eval = standardized_gates(&mut g_eval, &sims_eval, &stats).unwrap();
    for &gate in gates.iter() {
        let v = g.value(gate);
        assert!(v > 0.0 && v < 1.0, "train-path gate {v} left (0, 1)");
    }
    for &gate in gates_eval.iter() {
        let v = g_eval.value(gate);
        assert!(v > 0.0 && v < 1.0, "eval-path gate {v} left (0, 1)");
    }

    // Class affinity graphs are symmetric with a unit diagonal.
    for graph in class_graphs.iter() {
        for i in 0..graph.n {
            assert_eq!(graph.adjacency[i * graph.n + i], 1.0, "diagonal not 1");
            for j in 0..graph.n {
                let ij = graph.adjacency[i * graph.n + j];
                let ji = graph.adjacency[j * graph.n + i];
                assert_eq!(ij, ji, "affinity asymmetric at ({i}, {j})");
            }
        }
    }
    println!("PASS criterion 3: row-stochastic match distributions, shift-invariant softmax, permutation-invariant pooling, batch-size-independent predictions, gates in (0,1), symmetric unit-diagonal affinities");
}

#[test]
fn criterion_4_end_to_end_learning() {
    let spec = SyntheticSpec::default();
    let splits = generate_bundles(&spec).expect("synthetic dataset generates");
    let train_set = &splits.iter().find(|(n, _)| n == "train").unwrap().1;
    let test_set = &splits.iter().find(|(n, _)| n == "test").unwrap().1;
    assert_eq!((train_set.len(), test_set.len()), (300, 90));

    let lex = shipped_lexicons(50);
    let cfg = RunConfig {
        hidden: 64,
        heads: 8,
        epochs: 12,
        seed: 0,
        ..RunConfig::default()
    };
    assert_eq!(cfg.embed_dim, lex.dim);

    let started = Instant::now();
    let out = train::train::<f32>(&cfg, train_set, None, &lex, None, None).expect("training runs");
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "training took {elapsed:?}, budget is 5 minutes"
    );

    let class_graphs = build_class_graphs(&lex).unwrap();
    let metrics =
        eval::evaluate::<f32>(&cfg, &out.store, &out.model, &class_graphs, &out.stats, test_set)
            .unwrap();
    assert!(
        metrics.overall >= 0.95,
        "held-out accuracy {:.4} below 0.95 after {} epochs",
        metrics.overall,
        cfg.epochs
    );

    // A rerun from the same seed reproduces the epoch log bit for bit.
    let again = train::train::<f32>(&cfg, train_set, None, &lex, None, None).unwrap();
    let log_a = serde_json::to_string(&out.epochs).unwrap();
    let log_b = serde_json::to_string(&again.epochs).unwrap();
    assert_eq!(log_a, log_b, "rerun log diverged");

    println!(
        "PASS criterion 4: {:.2}% held-out accuracy after {} epochs in {:.2?}, rerun log bitwise identical",
        metrics.overall * 100.0,
        cfg.epochs,
        elapsed
    );
}

#[test]
fn criterion_5_ablation_grid() {
    let spec = SyntheticSpec {
        dim: 16,
        scene_scales: 2,
        splits: vec![("train".into(), 24), ("test".into(), 12)],
        faces: (1, 3),
        objects: (0, 2),
        seed: 11,
        ..SyntheticSpec::default()
    };
    let splits = generate_bundles(&spec).unwrap();
    let train_set = &splits[0].1;
    let test_set = &splits[1].1;
    let cfg = RunConfig {
        hidden: 16,
        heads: 4,
        fusion_depth: 2,
        scene_scales: 2,
        embed_dim: 10,
        epochs: 3,
        seed: 5,
        ..RunConfig::default()
    };
    let lex = micro_lexicons(cfg.embed_dim);
    let rows = ablate::run_ablation::<f32>(&cfg, train_set, test_set, &lex).expect("all variants run");

    let want_labels = [
        "B1",
        "B2 w/o CAM",
        "B2",
        "B3",
        "B4 w/o $L_{SAM}$",
        "B4 w/o SFF",
        "B4 (ours)",
    ];
    assert_eq!(rows.len(), want_labels.len());
    for (row, want) in rows.iter().zip(want_labels) {
        assert_eq!(row.label, want);
        for v in [row.pos, row.neu, row.neg, row.overall] {
            assert!(v.is_finite() && (0.0..=100.0).contains(&v), "{}: {v}", row.label);
        }
    }
    let csv = ablate::ablation_csv(&rows);
    assert!(csv.starts_with("variant,pos,neu,neg,overall\n"));
    assert_eq!(csv.lines().count(), 8);
    println!("PASS criterion 5: 7 ablation variants trained and scored\n{csv}");
}

#[test]
fn criterion_6_checkpoint_roundtrip_and_exact_resume() {
    let cfg = RunConfig { epochs: 4, ..micro_config() };
    let lex = micro_lexicons(cfg.embed_dim);
    let bundles = micro_bundles(cfg.hidden);

    // Byte-lossless round trip of a trained checkpoint.
    let full = train::train::<f32>(&cfg, &bundles, None, &lex, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    checkpoint::save(&a, &full.final_checkpoint).unwrap();
    let loaded = checkpoint::load(&a).unwrap();
    assert_eq!(loaded, full.final_checkpoint);
    checkpoint::save(&b, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "checkpoint bytes changed across save/load/save"
    );

    // Interrupting after 2 epochs and resuming matches the uninterrupted
    // run step for step.
    let head_cfg = RunConfig { epochs: 2, ..cfg.clone() };
    let head = train::train::<f32>(&head_cfg, &bundles, None, &lex, None, None).unwrap();
    let resumed =
        train::train::<f32>(&cfg, &bundles, None, &lex, Some(&head.final_checkpoint), None).unwrap();
    let tail_a = serde_json::to_string(&full.epochs[2..]).unwrap();
    let tail_b = serde_json::to_string(&resumed.epochs).unwrap();
    assert_eq!(tail_a, tail_b, "resumed epochs diverged from the straight run");
    for ((_, pa), (_, pb)) in full.store.iter().zip(resumed.store.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.data, pb.data, "parameter {} differs after resume", pa.name);
    }
    assert_eq!(full.final_checkpoint, resumed.final_checkpoint);
    println!("PASS criterion 6: checkpoint round-trip byte-lossless, resume reproduces the straight run exactly");
}
