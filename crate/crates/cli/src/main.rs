use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histotune::commands::{self, ExtractInput};
use histotune::experiment::ExperimentKind;
use histotune::{logging, CliError, PipelineConfig, Result};

#[derive(Debug, Parser)]
#[command(name = "histotune", version, about = "Fine-tuned tissue feature extraction and downstream experiments")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set eval.repeats=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render source and target tile folders plus patient slides and targets.
    GenSynthetic,
    /// Train the full network on the source-domain tiles.
    Pretrain,
    /// Two-step fine-tuning on the target-domain tiles.
    Finetune {
        /// Pretrained checkpoint (defaults to the configured path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extract features from a class-folder dataset or a patient manifest.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output file stem inside the features directory.
        #[arg(long)]
        name: String,
    },
    /// Compare two feature files under repeated k-fold cross-validation.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        /// Baseline features.
        #[arg(long)]
        features_a: PathBuf,
        /// Features expected to improve on the baseline.
        #[arg(long)]
        features_b: PathBuf,
        /// Target table for the expression and mutation experiments.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Rebuild tables and figures from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Everything from synthetic data to the selected experiments.
    Run {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "tissue,expression,mutation")]
        experiments: Vec<ExperimentKind>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    }
    .with_overrides(&cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::config("threads", e.to_string()))?;
    match cli.command {
        Command::GenSynthetic => {
            commands::gen_synthetic(&cfg)?;
        }
        Command::Pretrain => {
            commands::pretrain(&cfg)?;
        }
        Command::Finetune { checkpoint } => {
            commands::finetune(&cfg, checkpoint.as_deref())?;
        }
        Command::Extract { checkpoint, dataset, manifest, name } => {
            let input = match (dataset, manifest) {
                (Some(d), _) => ExtractInput::Dataset(d),
                (None, Some(m)) => ExtractInput::Manifest(m),
                (None, None) => return Err(CliError::config("dataset", "either --dataset or --manifest is required")),
            };
            commands::extract(&cfg, &checkpoint, &input, &name)?;
        }
        Command::Experiment { kind, features_a, features_b, targets } => {
            let report = commands::experiment(&cfg, kind, &features_a, &features_b, targets.as_deref())?;
            println!(
                "{} {}: {} {:.4} +- {:.4}, {} {:.4} +- {:.4}, p = {:.3e}",
                kind.name(),
                report.metric,
                report.extractors[0],
                report.summary[0].mean,
                report.summary[0].sd,
                report.extractors[1],
                report.summary[1].mean,
                report.summary[1].sd,
                report.p_value
            );
        }
        Command::Report { input, out_dir } => {
            for path in commands::regenerate_report(&input, out_dir.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::Run { experiments } => {
            let out = commands::run_all(&cfg, &experiments)?;
            for r in [Some(&out.tissue), out.expression.as_ref(), out.mutation.as_ref()].into_iter().flatten() {
                println!(
                    "{} {}: {} {:.4}, {} {:.4}, p = {:.3e}",
                    r.experiment.name(),
                    r.metric,
                    r.extractors[0],
                    r.summary[0].mean,
                    r.extractors[1],
                    r.summary[1].mean,
                    r.p_value
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
