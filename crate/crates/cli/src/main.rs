use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;

use nigdate::data::Partition;
use nigdate::evaluation::UncertaintyKind;
use nigdate::pipeline::{
    cmd_degrade_eval, cmd_evaluate, cmd_generate, cmd_report, cmd_selective, cmd_train, EvaluateConfig, GenerateConfig,
    ReportConfig, SelectiveConfig, TrainMethod, TrainRunConfig,
};

/// Evidential manuscript dating: corpus generation, training, evaluation.
#[derive(Parser)]
#[command(name = "nigdate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render, tile, filter and split a synthetic corpus.
    Generate(GenerateArgs),
    /// Train an evidential, point, classifier or ensemble model.
    Train(TrainArgs),
    /// Evaluate a model on one partition and write the report and CSVs.
    Evaluate(EvaluateArgs),
    /// Run the degradation suite.
    DegradeEval(DegradeArgs),
    /// Recompute the selective-prediction table from saved predictions.
    Selective(SelectiveArgs),
    /// Compare all five methods on one partition.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pages_per_codex: Option<usize>,
    #[arg(long)]
    page_side: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Evidential,
    Point,
    Classifier,
    Ensemble,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Ensemble size.
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Evidence regularizer weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Val,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Train => Partition::Train,
            PartitionArg::Val => Partition::Val,
            PartitionArg::Test => Partition::Test,
        }
    }
}

#[derive(Args)]
struct ModelSource {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint, ensemble manifest, or training output directory.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Treat the checkpoint as an MC-Dropout predictor.
    #[arg(long)]
    mc_dropout: bool,
    /// MC-Dropout passes.
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    confidence: Option<f64>,
    /// Write extractor features to features.csv.
    #[arg(long)]
    features: bool,
    /// Page id to map with a sliding window; repeatable.
    #[arg(long = "spatial-page")]
    spatial_pages: Vec<u32>,
    #[arg(long)]
    spatial_stride: Option<usize>,
    /// Also run the degradation suite.
    #[arg(long)]
    degradations: bool,
}

#[derive(Args)]
struct DegradeArgs {
    #[command(flatten)]
    source: ModelSource,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyArg {
    Total,
    Aleatoric,
    Epistemic,
}

#[derive(Args)]
struct SelectiveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// predictions.json from `evaluate`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated retain fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    key: Option<KeyArg>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory with classifier/, point/, ensemble/ and evidential/ outputs.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    passes: Option<usize>,
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn evaluate_config(src: ModelSource) -> Result<EvaluateConfig> {
    let mut cfg: EvaluateConfig = load(src.config.as_deref())?;
    set(&mut cfg.corpus, src.corpus);
    set(&mut cfg.model, src.model);
    set(&mut cfg.out, src.out);
    set(&mut cfg.partition, src.partition.map(Into::into));
    set(&mut cfg.seed, src.seed);
    set(&mut cfg.passes, src.passes);
    cfg.mc_dropout |= src.mc_dropout;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg: GenerateConfig = load(a.config.as_deref())?;
            set(&mut cfg.out, a.out);
            set(&mut cfg.corpus.synth.seed, a.seed);
            set(&mut cfg.corpus.synth.pages_per_codex, a.pages_per_codex);
            set(&mut cfg.corpus.synth.page_side, a.page_side);
            let s = cmd_generate(&cfg).context("generate failed")?;
            info!(
                "{} pages ({} train / {} val / {} test), {} patches admitted, {} rejected",
                s.pages, s.train_pages, s.val_pages, s.test_pages, s.patches, s.rejected
            );
        }
        Command::Train(a) => {
            let mut cfg: TrainRunConfig = load(a.config.as_deref())?;
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.out, a.out);
            set(
                &mut cfg.method,
                a.method.map(|m| match m {
                    MethodArg::Evidential => TrainMethod::Evidential,
                    MethodArg::Point => TrainMethod::Point,
                    MethodArg::Classifier => TrainMethod::Classifier,
                    MethodArg::Ensemble => TrainMethod::Ensemble,
                }),
            );
            set(&mut cfg.members, a.members);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.weight_decay, a.weight_decay);
            set(&mut cfg.train.lambda, a.lambda);
            if a.no_augment {
                cfg.train.augment = false;
            }
            let s = cmd_train(&cfg).context("train failed")?;
            info!("saved {}", s.artifact.display());
        }
        Command::Evaluate(a) => {
            let mut cfg = evaluate_config(a.source)?;
            set(&mut cfg.report.confidence, a.confidence);
            set(&mut cfg.spatial_stride, a.spatial_stride);
            cfg.export_features |= a.features;
            cfg.degradations |= a.degradations;
            cfg.spatial_pages.extend(a.spatial_pages);
            let r = cmd_evaluate(&cfg).context("evaluate failed")?;
            let picp = r.picp.map_or("n/a".to_string(), |p| format!("{:.3}", p));
            println!("{}: MAE {:.2} years, PICP {picp}, n = {}", r.method, r.mae_years, r.n);
        }
        Command::DegradeEval(a) => {
            let cfg = evaluate_config(a.source)?;
            for row in cmd_degrade_eval(&cfg).context("degrade-eval failed")? {
                let std = row.mean_std_years.map_or("n/a".to_string(), |s| format!("{s:.2}"));
                println!("{:<18} MAE {:>8.2}  mean std {std}", row.condition, row.mae_years);
            }
        }
        Command::Selective(a) => {
            let mut cfg: SelectiveConfig = load(a.config.as_deref())?;
            set(&mut cfg.predictions, a.predictions);
            set(&mut cfg.out, a.out);
            set(&mut cfg.fractions, a.fractions);
            set(
                &mut cfg.key,
                a.key.map(|k| match k {
                    KeyArg::Total => UncertaintyKind::Total,
                    KeyArg::Aleatoric => UncertaintyKind::Aleatoric,
                    KeyArg::Epistemic => UncertaintyKind::Epistemic,
                }),
            );
            if cfg.fractions.is_empty() {
                bail!("no retain fractions given");
            }
            for row in cmd_selective(&cfg).context("selective failed")? {
                println!("{:>5.2}  kept {:>6}  MAE {:>8.2}  mean unc {:.2}", row.fraction, row.kept, row.mae_years, row.mean_uncertainty);
            }
        }
        Command::Report(a) => {
            let mut cfg: ReportConfig = load(a.config.as_deref())?;
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.models, a.models);
            set(&mut cfg.out, a.out);
            set(&mut cfg.partition, a.partition.map(Into::into));
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.passes, a.passes);
            let fmt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
            println!("{:<12} {:>6} {:>9} {:>7} {:>9} {:>7}", "method", "passes", "MAE", "PICP", "MPIW", "rho");
            for r in cmd_report(&cfg).context("report failed")? {
                println!(
                    "{:<12} {:>6} {:>9.2} {:>7} {:>9} {:>7}",
                    r.method,
                    r.passes,
                    r.mae_years,
                    fmt(r.picp, 3),
                    fmt(r.mpiw_years, 1),
                    fmt(r.spearman_rho, 3)
                );
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
