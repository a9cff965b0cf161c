use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg::data::{DatasetName, DatasetSpec, Split};
use promptseg::metrics::{MetricConfig, MetricReport};
use promptseg::train::{
    evaluate, evaluate_surrogate, fit_surrogate, infer, EpochLog, FitOutcome, InferOptions,
};
use promptseg::{fit, SegmenterConfig, TrainConfig};

const DATA_ROOT_ENV: &str = "PROMPTSEG_DATA_ROOT";

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Prompt generators for a frozen segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a prompt generator against the frozen backend.
    Train(TrainArgs),
    /// Fit the lightweight surrogate decoder to a trained generator.
    TrainSurrogate(TrainArgs),
    /// Score a checkpoint on a dataset split and write CSV + JSON reports.
    Eval(EvalArgs),
    /// Predict masks for individual images.
    Infer(InferArgs),
    /// Summarise metric reports or training logs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Stub,
    VitHuge,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Converted foundation weights (safetensors).
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl BackendArgs {
    fn resolve(&self, base: Option<SegmenterConfig>) -> Result<SegmenterConfig> {
        let mut cfg = match (self.backend, base) {
            (Some(Backend::Stub), _) => SegmenterConfig::stub(),
            (Some(Backend::VitHuge), _) => SegmenterConfig::vit_huge(PathBuf::new()),
            (None, Some(b)) => b,
            (None, None) => SegmenterConfig::stub(),
        };
        if let Some(w) = &self.weights {
            cfg.weights_path = Some(w.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with TrainConfig keys.
    #[arg(short, long)]
    config: PathBuf,
    /// Dataset root; falls back to $PROMPTSEG_DATA_ROOT when the config has none.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Generator checkpoint (surrogate training only).
    #[arg(long)]
    generator: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score the surrogate decoder stored here instead of the frozen backend.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Take dataset and backend from a training config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Polyp test partition, e.g. Kvasir.
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Output directory for report.csv and report.json.
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Also write 8-bit probability maps.
    #[arg(long)]
    probabilities: bool,
    #[arg(long)]
    threshold: Option<f64>,
    /// Model input size as HxW; the training size by default.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files or train_log.csv files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(h)?, p(w)?))
}

fn parse_dataset(name: &str) -> Result<DatasetName> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "monuseg" => DatasetName::Monuseg,
        "glas" => DatasetName::Glas,
        "polyp" | "polyp-combined" => DatasetName::PolypCombined,
        "sunseg" | "sun-seg" => DatasetName::Sunseg,
        other => bail!("unknown dataset {other:?} (monuseg, glas, polyp-combined, sunseg)"),
    })
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("split must be train or test, got {s:?}"),
    }
}

fn env_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// The flag wins; the environment only fills a root the config left empty.
fn apply_root(spec: &mut DatasetSpec, flag: Option<&Path>) {
    if spec.synthetic.is_some() {
        return;
    }
    if let Some(root) = flag {
        spec.root_dir = root.to_path_buf();
    } else if spec.root_dir.as_os_str().is_empty() {
        if let Some(root) = env_data_root() {
            spec.root_dir = root;
        }
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    apply_root(&mut cfg.dataset, args.data_root.as_deref());
    if let Some(v) = cfg.val_dataset.as_mut() {
        apply_root(v, args.data_root.as_deref());
    }
    if let Some(v) = args.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.checkpoint_dir {
        cfg.checkpoint_dir = v.clone();
    }
    if let Some(v) = &args.resume {
        cfg.resume_from = Some(v.clone());
    }
    if let Some(v) = &args.generator {
        cfg.generator_checkpoint = Some(v.clone());
    }
    cfg.backend = args.backend.resolve(Some(cfg.backend))?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(out: &FitOutcome) {
    for e in &out.history {
        log::info!(
            "epoch {} step {} loss {:.4} val dice {:.4}",
            e.epoch,
            e.global_step,
            e.train_loss,
            e.val_dice
        );
    }
    println!("final checkpoint: {}", out.final_checkpoint.display());
    if let Some(b) = &out.best_checkpoint {
        println!("best checkpoint: {}", b.display());
    }
    println!("log: {}", out.log_path.display());
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let base = args
        .config
        .as_deref()
        .map(TrainConfig::load)
        .transpose()
        .context("loading eval config")?;
    let split = parse_split(&args.split)?;
    let mut spec = match (&args.dataset, &base) {
        (Some(name), _) => DatasetSpec::new(parse_dataset(name)?, PathBuf::new(), split),
        (None, Some(b)) => {
            let mut d = b.dataset.clone();
            d.split = split;
            d
        }
        (None, None) => bail!("pass --dataset or --config"),
    };
    if args.partition.is_some() {
        spec.partition = args.partition.clone();
    }
    apply_root(&mut spec, args.data_root.as_deref());
    let mut metrics = MetricConfig::default();
    if let Some(t) = args.threshold {
        metrics.threshold = t;
    }
    let report = match &args.surrogate {
        Some(s) => evaluate_surrogate(&args.checkpoint, s, &spec, &metrics)?,
        None => {
            let backend = args.backend.resolve(base.map(|b| b.backend))?;
            evaluate(&args.checkpoint, &spec, &backend, &metrics)?
        }
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let csv = args.out.join("report.csv");
    let json = args.out.join("report.json");
    report.save(&csv, &json)?;
    print_report(&format!("{} ({})", spec.name, report.per_sample.len()), &report);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let base = args
        .config
        .as_deref()
        .map(TrainConfig::load)
        .transpose()
        .context("loading infer config")?;
    let backend = args.backend.resolve(base.map(|b| b.backend))?;
    let options = InferOptions {
        out_dir: args.out_dir.clone(),
        save_probabilities: args.probabilities,
        resize: args.resize,
        threshold: args.threshold,
    };
    let summary = infer(&args.checkpoint, &args.images, &backend, &options)?;
    for (path, err) in &summary.failures {
        log::warn!("{}: {err}", path.display());
    }
    println!(
        "{} images written ({} files), {} failed",
        args.images.len() - summary.failures.len(),
        summary.written.len(),
        summary.failures.len()
    );
    if !args.images.is_empty() && summary.written.is_empty() {
        bail!("no image could be processed");
    }
    Ok(())
}

const COLUMNS: [&str; 7] = ["dice", "iou", "sen", "f_beta", "f_beta_w", "s_alpha", "e_phi_mn"];

fn print_report(label: &str, report: &MetricReport) {
    let a = &report.aggregate;
    let vals = [a.dice, a.iou, a.sen, a.f_beta, a.f_beta_w, a.s_alpha, a.e_phi_mn];
    let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
    println!("{label:<32} {}", cells.join("  "));
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let header: Vec<String> = COLUMNS.iter().map(|c| format!("{c:>6}")).collect();
    let mut printed_header = false;
    for path in &args.files {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            if !printed_header {
                println!("{:<32} {}", "report", header.join("  "));
                printed_header = true;
            }
            let report: MetricReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            print_report(&path.display().to_string(), &report);
        } else {
            summarise_log(path, &text)?;
        }
    }
    Ok(())
}

fn summarise_log(path: &Path, text: &str) -> Result<()> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let row: EpochLog = row.with_context(|| format!("parsing {}", path.display()))?;
        rows.push(row);
    }
    let Some(last) = rows.last() else {
        println!("{}: empty log", path.display());
        return Ok(());
    };
    let best = rows
        .iter()
        .max_by(|a, b| a.val_dice.total_cmp(&b.val_dice))
        .expect("non-empty");
    println!(
        "{}: {} epochs, {} steps, final loss {:.4}, best val dice {:.4} at epoch {}",
        path.display(),
        rows.len(),
        last.global_step,
        last.train_loss,
        best.val_dice,
        best.epoch
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => print_outcome(&fit(&load_config(args)?)?),
        Command::TrainSurrogate(args) => print_outcome(&fit_surrogate(&load_config(args)?)?),
        Command::Eval(args) => run_eval(args)?,
        Command::Infer(args) => run_infer(args)?,
        Command::Report(args) => run_report(args)?,
    }
    Ok(())
}
