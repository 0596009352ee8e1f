use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynamarl::cli::{cmd_eval, cmd_export, cmd_train, CliError, EvalArgs, ExportArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "dynamarl", version, about = "Multi-agent training with agents joining and leaving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a spec file.
    Train(RunOpts),
    /// Same as train, but the spec must contain a join event.
    Adapt(RunOpts),
    /// Greedy evaluation of one or more checkpoints.
    Eval {
        /// Checkpoint as LABEL=PATH (or a bare PATH). Repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// PREDATOR_LABEL,PREY_LABEL. Repeatable.
        #[arg(long = "pairing")]
        pairings: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Independent evaluation runs per pairing (seeds seed..seed+runs).
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Selector dump and reward curves with confidence bands from a run directory.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        smooth: usize,
        /// Also write an SVG plot.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(clap::Args)]
struct RunOpts {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's seeds. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the spec's episode count.
    #[arg(long)]
    episodes: Option<usize>,
}

impl RunOpts {
    fn into_args(self, require_join: bool) -> TrainArgs {
        TrainArgs {
            spec: self.spec,
            seeds: self.seeds,
            out: self.out,
            episodes: self.episodes,
            require_join,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(o) => cmd_train(&o.into_args(false)).map(|_| ()),
        Command::Adapt(o) => cmd_train(&o.into_args(true)).map(|_| ()),
        Command::Eval {
            checkpoints,
            pairings,
            episodes,
            runs,
            seed,
            out,
        } => cmd_eval(&EvalArgs {
            checkpoints,
            pairings,
            episodes,
            runs,
            seed,
            out,
        }),
        Command::Export { run, out, smooth, svg } => cmd_export(&ExportArgs { run, out, smooth, svg }),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
