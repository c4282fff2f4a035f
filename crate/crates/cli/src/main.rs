use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icl_lab::datasets::{dataset_stats, load_records};
use icl_lab::harness::{emit_results, needle_test, run_experiment, summarize, ExperimentConfig, HarnessError, OutputFormat};
use icl_lab::model::{build_induction_model, required_d_model, save_weights};
use icl_lab::prompting::PromptTemplate;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "Long-context in-context learning experiments on a constructed toy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write one row per grid point.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output path; `.json` writes full per-example records, anything else CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Copying test: evaluate on the very examples placed in context.
    Needle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset statistics: trimmed mean demonstration length, size, labels.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        template: String,
    },
    /// Weight file utilities.
    Weights {
        #[command(subcommand)]
        action: WeightsAction,
    },
}

#[derive(Subcommand)]
enum WeightsAction {
    /// Write the constructed induction model for a vocabulary size.
    BuildInduction {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn write_results(results: &[icl_lab::metrics::RunResult], out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => emit_results(results, OutputFormat::from_path(path), path).map_err(|e| Failure::Runtime(e.to_string())),
        None => {
            let csv = icl_lab::harness::results_to_csv(results).map_err(|e| Failure::Runtime(e.to_string()))?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, workers } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(w) = workers {
                if w == 0 {
                    return Err(Failure::Config("--workers must be at least 1".into()));
                }
                cfg.workers = w;
            }
            let out = out.or_else(|| cfg.output.clone());
            let outcome = run_experiment(&cfg)?;
            for c in summarize(&outcome.results) {
                log::info!("{} {} {:?} k={} mean_acc={:.4}", c.strategy, c.ordering, c.block, c.k, c.mean_accuracy);
            }
            if !outcome.results.is_empty() {
                write_results(&outcome.results, out.as_deref())?;
            }
            match outcome.failure {
                Some(f) => Err(Failure::Runtime(format!("{f} ({} grid points kept)", outcome.results.len()))),
                None => Ok(()),
            }
        }
        Command::Needle { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let results = needle_test(&cfg)?;
            write_results(&results, out.as_deref())
        }
        Command::Stats { data, template } => {
            let t = PromptTemplate::preset(&template).map_err(|e| Failure::Config(e.to_string()))?;
            let d = load_records(&data).map_err(|e| Failure::Config(e.to_string()))?;
            let s = dataset_stats(&d, &t);
            println!("dataset\tavg_demo_length\tsize\tnum_labels");
            println!("{}\t{:.2}\t{}\t{}", d.name, s.avg_demo_length, s.size, s.num_labels);
            Ok(())
        }
        Command::Weights {
            action: WeightsAction::BuildInduction { vocab, out },
        } => {
            let w = build_induction_model(vocab, required_d_model(vocab)).map_err(|e| Failure::Config(e.to_string()))?;
            save_weights(&w, &out).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} (vocab {}, d_model {})", out.display(), w.vocab_size(), w.d_model());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
