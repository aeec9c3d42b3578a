//! `gan`: generate data, train, evaluate, ablate, and inspect the group
//! affect network from the command line.
//!
//! Exit codes: 0 on success, 1 for usage and validation problems (bad
//! flags, malformed configs or inputs), 2 for runtime failures (I/O,
//! divergence, failed gradient verification).

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use gan_core::config::{Precision, RunConfig, Variant};
use gan_core::data::checkpoint::{self, Checkpoint};
use gan_core::data::lexicon::{load_lexicons, LexiconSet};
use gan_core::data::synth::{generate_dataset, SyntheticSpec};
use gan_core::data::{load_manifest, load_split, FeatureBundle};
use gan_core::harness::{ablate, eval, gradcheck, train};
use gan_core::model::ModelParams;
use gan_core::nn::AdamState;
use gan_core::semantic::{build_class_graphs, build_emotion_tree};
use gan_core::{Error, Result, Scalar};

#[derive(Parser)]
#[command(
    name = "gan",
    version,
    about = "Group-level emotion recognition from scene, face, and object features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature-bundle dataset with a manifest.
    GenData(GenDataArgs),
    /// Train one model variant, writing logs and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Train and score every model variant, emitting the comparison table.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck,
    /// Print the emotion tree held in a lexicon file.
    InspectLexicons(LexiconArgs),
}

/// Flags shared by every run subcommand. A `--config` file supplies any
/// subset of the run configuration; flags override file values last-wins.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Configuration file (JSON); flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model wiring: B1, B2_noCAM, B2, B3, B4_noSAM, B4_noSFF, or B4.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Alignment-matching softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Output directory for logs, checkpoints, and tables.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset manifest file, or the directory holding `manifest.json`.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Lexicon file.
    #[arg(long, value_name = "FILE")]
    lexicons: Option<PathBuf>,
    /// Element type: f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
}

impl Overrides {
    fn fold_into(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.lexicons {
            cfg.lexicons = Some(v.clone());
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
    }

    /// Configuration from defaults, then the file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
                serde_json::from_str(&text).map_err(|e| Error::parse(path.clone(), e.to_string()))?
            }
            None => RunConfig::default(),
        };
        self.fold_into(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset split to score.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Feature width of every generated row.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Scene pyramid levels per sample.
    #[arg(long, default_value_t = 4)]
    scene_scales: usize,
    /// Samples in the train split.
    #[arg(long = "train", default_value_t = 300, value_name = "N")]
    train_count: usize,
    /// Samples in the test split.
    #[arg(long = "test", default_value_t = 90, value_name = "N")]
    test_count: usize,
    /// Samples in a validation split (omitted when 0).
    #[arg(long = "val", default_value_t = 0, value_name = "N")]
    val_count: usize,
    #[arg(long, default_value_t = 1)]
    min_faces: usize,
    #[arg(long, default_value_t = 4)]
    max_faces: usize,
    #[arg(long, default_value_t = 0)]
    min_objects: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    /// Distance of each class anchor from the origin.
    #[arg(long, default_value_t = 5.0)]
    margin: f64,
    /// Standard deviation of the per-entry noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct LexiconArgs {
    /// Lexicon file.
    #[arg(long, value_name = "FILE")]
    lexicons: PathBuf,
    /// Embedding width to load at.
    #[arg(long, default_value_t = 50)]
    embed_dim: usize,
}

/// Write to stdout, treating a closed pipe (e.g. `gan ... | head`) as a
/// normal end of output rather than a crash.
fn emit(text: impl std::fmt::Display) {
    if write!(std::io::stdout(), "{text}").is_err() {
        process::exit(0);
    }
}

fn emitln(text: impl std::fmt::Display) {
    emit(format_args!("{text}\n"));
}

fn init_logging() -> Result<()> {
    let level = std::env::var("GAN_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => {
            return Err(Error::validation(
                "GAN_LOG_LEVEL",
                format!("unknown level '{other}' (expected error, info, or debug)"),
            ))
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            process::exit(code);
        }
    };
    let run = init_logging().and_then(|()| dispatch(cli));
    match run {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(if e.is_usage() { 1 } else { 2 });
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::InspectLexicons(args) => cmd_inspect_lexicons(args),
    }
}

fn required(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| {
        Error::contract(format!("{what} required: pass {flag} or set it in the config file"))
    })
}

fn load_data_split(cfg: &RunConfig, split: &str) -> Result<Vec<FeatureBundle>> {
    let data = required(&cfg.data, "dataset", "--data")?;
    let (manifest, base) = load_manifest(&data)?;
    load_split(&manifest, &base, split)
}

fn load_cfg_lexicons(cfg: &RunConfig) -> Result<LexiconSet> {
    let path = required(&cfg.lexicons, "lexicon file", "--lexicons")?;
    load_lexicons(&path, cfg.embed_dim)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut splits = vec![("train".to_string(), args.train_count)];
    if args.val_count > 0 {
        splits.push(("val".to_string(), args.val_count));
    }
    splits.push(("test".to_string(), args.test_count));
    let spec = SyntheticSpec {
        dim: args.dim,
        scene_scales: args.scene_scales,
        splits,
        faces: (args.min_faces, args.max_faces),
        objects: (args.min_objects, args.max_objects),
        margin: args.margin,
        noise: args.noise,
        seed: args.seed,
    };
    let manifest = generate_dataset(&spec, &args.out)?;
    for (split, files) in &manifest.splits {
        emitln(format_args!("{split}: {} samples", files.len()));
    }
    emitln(format_args!("wrote {}", args.out.join("manifest.json").display()));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let data = required(&cfg.data, "dataset", "--data")?;
    let (manifest, base) = load_manifest(&data)?;
    let train_bundles = load_split(&manifest, &base, "train")?;
    let selection = ["val", "test"]
        .iter()
        .find(|s| manifest.splits.contains_key(**s))
        .map(|s| load_split(&manifest, &base, s))
        .transpose()?;
    let lexicons = load_cfg_lexicons(&cfg)?;
    let resume = args.resume.as_deref().map(checkpoint::load).transpose()?;
    match cfg.precision {
        Precision::F32 => {
            run_train::<f32>(&cfg, &train_bundles, selection.as_deref(), &lexicons, resume.as_ref())
        }
        Precision::F64 => {
            run_train::<f64>(&cfg, &train_bundles, selection.as_deref(), &lexicons, resume.as_ref())
        }
    }
}

fn run_train<S: Scalar>(
    cfg: &RunConfig,
    train_bundles: &[FeatureBundle],
    selection: Option<&[FeatureBundle]>,
    lexicons: &LexiconSet,
    resume: Option<&Checkpoint>,
) -> Result<()> {
    let out = train::train::<S>(cfg, train_bundles, selection, lexicons, resume, cfg.out.as_deref())?;
    if let Some(last) = out.epochs.last() {
        emitln(format_args!(
            "trained variant {} to epoch {}: total loss {:.6}, train accuracy {:.2}%",
            cfg.variant,
            last.epoch,
            last.losses.l_total,
            last.train_acc * 100.0
        ));
    }
    if let Some((epoch, metrics)) = &out.best {
        emitln(format_args!(
            "best selection accuracy {:.2}% at epoch {epoch}",
            metrics.overall * 100.0
        ));
    }
    if let Some(dir) = &cfg.out {
        emitln(format_args!("logs and checkpoints under {}", dir.display()));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.overrides.config.is_some() {
        return Err(Error::contract(
            "eval takes its configuration from the checkpoint; override with flags, not --config",
        ));
    }
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    args.overrides.fold_into(&mut cfg);
    cfg.validate()?;
    let bundles = load_data_split(&cfg, &args.split)?;
    let lexicons = load_cfg_lexicons(&cfg)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&cfg, &ckpt, &lexicons, &bundles, &args.split),
        Precision::F64 => run_eval::<f64>(&cfg, &ckpt, &lexicons, &bundles, &args.split),
    }
}

fn run_eval<S: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    lexicons: &LexiconSet,
    bundles: &[FeatureBundle],
    split: &str,
) -> Result<()> {
    let (mut store, model) = ModelParams::init::<S>(cfg);
    let mut adam = AdamState::new(&store);
    checkpoint::apply(ckpt, &mut store, &mut adam)?;
    let class_graphs = build_class_graphs(lexicons)?;
    let metrics = eval::evaluate::<S>(cfg, &store, &model, &class_graphs, &ckpt.sim_stats, bundles)?;
    emitln(format_args!(
        "{split}: {} samples, accuracy {:.2}%, per-class [{:.2}%, {:.2}%, {:.2}%]",
        metrics.count,
        metrics.overall * 100.0,
        metrics.per_class[0] * 100.0,
        metrics.per_class[1] * 100.0,
        metrics.per_class[2] * 100.0
    ));
    let rendered = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    emitln(&rendered);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
        let path = dir.join(format!("metrics_{split}.json"));
        fs::write(&path, rendered + "\n").map_err(|e| Error::io(path.clone(), e))?;
        emitln(format_args!("wrote {}", path.display()));
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let train_bundles = load_data_split(&cfg, "train")?;
    let eval_bundles = load_data_split(&cfg, "test")?;
    let lexicons = load_cfg_lexicons(&cfg)?;
    let rows = match cfg.precision {
        Precision::F32 => ablate::run_ablation::<f32>(&cfg, &train_bundles, &eval_bundles, &lexicons)?,
        Precision::F64 => ablate::run_ablation::<f64>(&cfg, &train_bundles, &eval_bundles, &lexicons)?,
    };
    let csv = ablate::ablation_csv(&rows);
    emit(&csv);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
        let path = dir.join("ablation.csv");
        fs::write(&path, &csv).map_err(|e| Error::io(path.clone(), e))?;
        emitln(format_args!("wrote {}", path.display()));
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let report = gradcheck::run_suite()?;
    emit(report.render());
    if !report.all_pass {
        process::exit(2);
    }
    Ok(())
}

fn cmd_inspect_lexicons(args: LexiconArgs) -> Result<()> {
    let set = load_lexicons(&args.lexicons, args.embed_dim)?;
    let tree = build_emotion_tree(&set)?;
    emit(tree.render());
    for class in &set.classes {
        emitln(format_args!(
            "{}: {} words, {}-dimensional embeddings",
            class.class_word,
            class.entries.len(),
            set.dim
        ));
    }
    Ok(())
}
