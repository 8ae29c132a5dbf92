use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use compressive_cli::commands::{
    cmd_analyze, cmd_eval, cmd_range, cmd_sample, cmd_train, exit_code, range_table, sweep_row, AnalyzeArgs, EvalArgs,
    RangeArgs, SampleArgs, TrainArgs, SWEEP_HEADER,
};
use compressive_cli::config::OUT_ROOT_VAR;

#[derive(Parser)]
#[command(name = "compressive", version, about = "Train and study compressive-memory transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice; commands are deterministic given it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Relative defaults live under $COMPRESSIVE_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a corpus, optionally sweeping memory sizes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Plain memory sizes to evaluate with, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_m_eval: Vec<usize>,
        /// Compressed memory sizes to evaluate with, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_cm_eval: Vec<usize>,
        #[arg(long)]
        max_windows: Option<usize>,
        /// Corpus whose word counts define the frequency buckets.
        #[arg(long)]
        frequency_corpus: Option<PathBuf>,
    },
    /// Attention per memory region and compression loss per layer.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        windows: usize,
    },
    /// Continue a prefix with nucleus sampling.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "\n")]
        prefix: String,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, default_value_t = 0.98)]
        p: f64,
    },
    /// Temporal range and attention cost against TransformerXL baselines.
    Range {
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        mem_len: u64,
        #[arg(long)]
        cmem_len: u64,
        #[arg(long)]
        rate: u64,
        #[arg(long)]
        seq_len: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let Global { seed, out } = cli.global;
    match cli.command {
        Command::Train { config, resume } => {
            let done = cmd_train(&TrainArgs {
                config,
                out,
                seed,
                resume,
            })?;
            println!("{}", done.valid.metrics_csv().trim_end());
            println!("checkpoint,{}", done.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            n_m_eval,
            n_cm_eval,
            max_windows,
            frequency_corpus,
        } => {
            let done = cmd_eval(&EvalArgs {
                checkpoint,
                corpus,
                n_m_eval,
                n_cm_eval,
                max_windows,
                frequency_corpus,
                out,
            })?;
            println!("{SWEEP_HEADER}");
            for r in &done.reports {
                println!("{}", sweep_row(r));
            }
        }
        Command::Analyze {
            checkpoint,
            corpus,
            windows,
        } => {
            let done = cmd_analyze(&AnalyzeArgs {
                checkpoint,
                corpus,
                windows,
                out,
            })?;
            print!("{}", done.buckets.to_csv());
            print!("{}", done.report.layer_csv());
        }
        Command::Sample {
            checkpoint,
            prefix,
            length,
            p,
        } => {
            let text = cmd_sample(&SampleArgs {
                checkpoint,
                prefix,
                length,
                p,
                seed: seed.unwrap_or(0),
            })?;
            println!("{text}");
        }
        Command::Range {
            layers,
            mem_len,
            cmem_len,
            rate,
            seq_len,
        } => {
            let args = RangeArgs {
                layers,
                mem_len,
                cmem_len,
                rate,
                seq_len,
            };
            print!("{}", range_table(&cmd_range(&args, out.as_deref())?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    log::debug!("output root from ${OUT_ROOT_VAR}: {:?}", std::env::var_os(OUT_ROOT_VAR));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
