mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use perfinline::Error;

use commands::{Ctx, Format};
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "perfinline", version, about = "Learned inlining over a static performance model")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus from a spec file or the config's [corpus] section.
    Gen {
        /// Corpus spec (TOML, the fields of a [corpus] section).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Autotune a corpus into a labelled dataset.
    Collect {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fit normalization and PCA on a dataset.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the speedup predictor.
    TrainIr2perf {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        preproc: PathBuf,
    },
    /// Leave-one-program-out cross-validation of the predictor.
    Crossval {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the inlining policy against a predictor.
    TrainPolicy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare inlining strategies on a held-out corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Corpora the policy must not be evaluated on.
        #[arg(long = "train-corpus")]
        train_corpus: Vec<PathBuf>,
    },
    /// Count tunable loop regions and autotune them.
    Autotune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run every stage end to end under --out.
    Demo,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::NotFound(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Schema { .. } => 3,
        Error::InsufficientData(_) => 4,
        Error::Overlap(_) => 5,
        _ => 1,
    }
}

fn run(cli: &Cli) -> perfinline::Result<String> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    if let Command::Gen { spec: Some(path) } = &cli.command {
        config.corpus = Some(config::load_corpus_spec(path)?);
    }
    let ctx = Ctx {
        config: &config,
        out: &cli.out,
        format: cli.format,
    };
    match &cli.command {
        Command::Gen { .. } => commands::gen(&ctx),
        Command::Collect { corpus } => commands::collect(&ctx, corpus),
        Command::Preprocess { dataset } => commands::preprocess(&ctx, dataset),
        Command::TrainIr2perf { dataset, preproc } => commands::train_ir2perf(&ctx, dataset, preproc),
        Command::Crossval { dataset } => commands::crossval(&ctx, dataset),
        Command::TrainPolicy { corpus, model } => commands::train_policy_cmd(&ctx, corpus, model),
        Command::Evaluate {
            corpus,
            policy,
            train_corpus,
        } => commands::evaluate_cmd(&ctx, corpus, policy, train_corpus),
        Command::Autotune { corpus, policy } => commands::autotune_cmd(&ctx, corpus, policy.as_deref()),
        Command::Demo => commands::demo(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(Error::Config(e.to_string())),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
