//! `mico`: generate synthetic bags, train and evaluate routing models, run
//! ablations and anchor sweeps, export assignments and check gradients.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mico_core::bagfile::{read_dataset, write_dataset};
use mico_core::harness::export::export_assignments;
use mico_core::harness::gradcheck::{check_model, sample_case, DEFAULT_STEP};
use mico_core::harness::study::{ablate, sweep_anchors, Comparison, SWEEP_COUNTS};
use mico_core::harness::train::{evaluate_checkpoint, test_split};
use mico_core::harness::{train, TrainConfig};
use mico_core::model::checkpoint::Checkpoint;
use mico_core::model::Pooling;
use mico_core::synth::{generate, SynthConfig};
use mico_core::{FeatureBag, MicoError, Task};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mico", version, about = "Context-aware cluster routing for multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of bag files plus a manifest.
    Synth(SynthArgs),
    /// Cross-validated training; writes a report and one checkpoint per fold.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Full model plus the three single-component ablations.
    Ablate(TrainArgs),
    /// One full run per layer-0 anchor count.
    SweepAnchors(SweepArgs),
    /// Per-instance anchor assignments of one bag at every layer.
    ExportAssignments(ExportArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Survival,
    Subtype,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Survival => Task::Survival,
            TaskArg::Subtype => Task::Subtype,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    GatedAttention,
    AnchorMean,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_bags: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Run only the first N folds.
    #[arg(long)]
    max_folds: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    ablate_route: bool,
    #[arg(long)]
    ablate_reducer: bool,
    #[arg(long)]
    ablate_kmeans_init: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated layer-0 anchor counts.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_COUNTS.to_vec())]
    counts: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// The held-out bags recorded in the checkpoint.
    Test,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Bag id; defaults to the first bag of the dataset.
    #[arg(long)]
    bag: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    anchors: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

fn read_text(path: &Path) -> Result<String, MicoError> {
    fs::read_to_string(path).map_err(|e| MicoError::Config(format!("{}: {e}", path.display())))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, MicoError> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    c.seed = a.seed;
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { c.$field = v; })*
        };
    }
    set!(
        epochs <- a.epochs,
        lr <- a.lr,
        grad_accum <- a.grad_accum,
        early_stop_patience <- a.patience,
        anchor_count <- a.anchors,
        layers <- a.layers,
        folds <- a.folds,
        task <- a.task.map(Task::from),
    );
    if a.max_folds.is_some() {
        c.max_folds = a.max_folds;
    }
    if let Some(p) = a.pooling {
        c.pooling = match p {
            PoolingArg::GatedAttention => Pooling::GatedAttention,
            PoolingArg::AnchorMean => Pooling::AnchorMean,
        };
    }
    c.ablate_route |= a.ablate_route;
    c.ablate_reducer |= a.ablate_reducer;
    c.ablate_kmeans_init |= a.ablate_kmeans_init;
    c.validate()?;
    Ok(c)
}

fn write(path: &Path, text: &str) -> Result<(), MicoError> {
    fs::write(path, text)?;
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<(), MicoError> {
    let mut c = match &a.config {
        Some(p) => SynthConfig::from_toml(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.n_bags {
        c.n_bags = v;
    }
    if let Some(v) = a.dim {
        c.d = v;
    }
    if let Some(v) = a.task {
        c.task = v.into();
    }
    if let Some(v) = a.noise_std {
        c.noise_std = v;
    }
    let data = generate(&c)?;
    let manifest = write_dataset(&data.bags, &a.out)?;
    let snapshot = toml::to_string(&c).map_err(|e| MicoError::Config(e.to_string()))?;
    write(&a.out.join("synth.toml"), &snapshot)?;
    println!("wrote {} bags to {}", data.bags.len(), manifest.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), MicoError> {
    let cfg = train_config(&a)?;
    let bags = read_dataset(&a.data)?;
    let out = train(&cfg, &bags)?;
    fs::create_dir_all(&a.out)?;
    for ck in &out.checkpoints {
        ck.save(a.out.join(format!("fold{}.ckpt", ck.meta.fold.unwrap_or(0))))?;
    }
    write(&a.out.join("report.json"), &out.report.to_json())?;
    write(&a.out.join("curves.csv"), &out.report.curves_csv())?;
    let table = out.report.render();
    write(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_comparison(dir: &Path, stem: &str, cmp: &Comparison) -> Result<(), MicoError> {
    fs::create_dir_all(dir)?;
    let table = cmp.render();
    write(&dir.join(format!("{stem}.txt")), &table)?;
    write(&dir.join(format!("{stem}.csv")), &cmp.csv())?;
    write(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(cmp)?)?;
    print!("{table}");
    Ok(())
}

fn run_ablate(a: TrainArgs) -> Result<(), MicoError> {
    let cfg = train_config(&a)?;
    let bags = read_dataset(&a.data)?;
    write_comparison(&a.out, "ablation", &ablate(&cfg, &bags)?)
}

fn run_sweep(a: SweepArgs) -> Result<(), MicoError> {
    let cfg = train_config(&a.train)?;
    let bags = read_dataset(&a.train.data)?;
    write_comparison(&a.train.out, "anchor_sweep", &sweep_anchors(&cfg, &bags, &a.counts)?)
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), MicoError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let bags = read_dataset(&a.data)?;
    let split: Vec<FeatureBag> = match a.split {
        SplitArg::Test => test_split(&ck, &bags)?.into_iter().cloned().collect(),
        SplitArg::All => bags,
    };
    let metrics = evaluate_checkpoint(&ck, &split)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<(), MicoError> {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let bags = read_dataset(&a.data)?;
    let bag = match &a.bag {
        Some(id) => bags
            .iter()
            .find(|b| &b.bag_id == id)
            .ok_or_else(|| MicoError::Data(format!("no bag `{id}` in the dataset")))?,
        None => &bags[0],
    };
    let text = export_assignments(&model, bag)?;
    match &a.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_gradcheck(a: GradcheckArgs) -> Result<(), MicoError> {
    let mut worst: f64 = 0.0;
    for task in [Task::Survival, Task::Subtype] {
        let (model, bag) = sample_case(task, a.instances, a.dim, a.anchors, a.layers, a.seed)?;
        let report = check_model(&model, &bag, a.step)?;
        println!("{task} head, loss {:.6}", report.loss);
        print!("{}", report.render());
        worst = worst.max(report.max_rel_err);
    }
    if worst >= GRADCHECK_TOLERANCE {
        return Err(MicoError::Numerical(format!(
            "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::SweepAnchors(a) => run_sweep(a),
        Command::ExportAssignments(a) => run_export(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
