//! The `tsa` command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure
//! (training diverged).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use tsa::tree::{EnsembleMode, Method};

use commands::{DataKind, EvalTarget, GenDataArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tsa::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(tsa::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsa", version, about = "Tree-structured auxiliary online distillation: train, evaluate and compare")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Spirals,
    Blobs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EnsembleArg {
    Probs,
    Logits,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured tree; writes metrics.jsonl, summary.csv,
    /// model.tsam and config.cfg to output.dir.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set seed=1`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set output.dir=DIR`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Accuracy of a saved model on a dataset (.csv or raw TSAD).
    Eval {
        snapshot: PathBuf,
        data: PathBuf,
        /// Evaluate branch K (1-based) as the pruned standalone network.
        #[arg(long, value_name = "K", conflicts_with = "ensemble")]
        branch: Option<usize>,
        /// Evaluate the ensemble of all branches.
        #[arg(long, value_name = "MODE", num_args = 0..=1, default_missing_value = "probs")]
        ensemble: Option<EnsembleArg>,
        /// Class count of the data file; defaults to the model's.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train several topologies on the same seeds and data; prints CSV.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,tsa,one_style,full_dup")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Concurrent training runs; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Also write the CSV here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Training-time parameter counts of every method for the configured
    /// base network.
    Params {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write a synthetic dataset (.csv by extension, raw TSAD otherwise).
    GenData {
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = tsa::data::SPIRAL_TURNS)]
        turns: f64,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Subcommands whose behaviour is driven by a config file.
const CONFIG_COMMANDS: [&str; 3] = ["train", "compare", "params"];

pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in CONFIG_COMMANDS {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(config::keys_help()));
    }
    cmd
}

/// Long help of one subcommand, as printed by `tsa <name> --help`.
pub fn render_help(name: &str) -> String {
    let mut cmd = command();
    cmd.build();
    cmd.find_subcommand_mut(name)
        .unwrap_or_else(|| panic!("no subcommand `{name}`"))
        .render_long_help()
        .to_string()
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    names
        .iter()
        .map(|n| n.trim().parse::<Method>().map_err(CliError::from))
        .collect()
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, mut set, out, quiet } => {
            if let Some(dir) = out {
                set.push(format!("output.dir={}", dir.display()));
            }
            let dir = commands::cmd_train(&config, &set, quiet)?;
            if !quiet {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Eval {
            snapshot,
            data,
            branch,
            ensemble,
            classes,
        } => {
            let target = match (branch, ensemble) {
                (Some(k), _) => EvalTarget::Branch(k),
                (None, Some(EnsembleArg::Probs)) => EvalTarget::Ensemble(EnsembleMode::Probabilities),
                (None, Some(EnsembleArg::Logits)) => EvalTarget::Ensemble(EnsembleMode::Logits),
                (None, None) => EvalTarget::All,
            };
            print!("{}", commands::cmd_eval(&snapshot, &data, classes, target)?);
        }
        Command::Compare {
            config,
            methods,
            seeds,
            threads,
            set,
            out,
        } => {
            let methods = parse_methods(&methods)?;
            let threads = threads.unwrap_or_else(thread_count);
            print!(
                "{}",
                commands::cmd_compare(&config, &set, &methods, seeds, threads, out.as_deref())?
            );
        }
        Command::Params { config, set } => print!("{}", commands::cmd_params(&config, &set)?),
        Command::GenData {
            kind,
            out,
            n_per_class,
            classes,
            noise,
            turns,
            dim,
            separation,
            seed,
        } => {
            let args = GenDataArgs {
                kind: match kind {
                    Kind::Spirals => DataKind::Spirals,
                    Kind::Blobs => DataKind::Blobs,
                },
                n_per_class,
                classes,
                noise,
                turns,
                dim,
                separation,
                seed,
            };
            let n = commands::cmd_gen_data(&args, &out)?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

fn thread_count() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
