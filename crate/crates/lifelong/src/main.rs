use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lifelong::runner::{compare, eval_checkpoint, run, RunOptions};

#[derive(Parser)]
#[command(name = "lifelong", version, about = "Lifelong masked-LM pretraining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config and $LIFELONG_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel fine-tuning jobs in the evaluation stage.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Recompute stages even when cached.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain over a stream, evaluate, and plot.
    Run { config: PathBuf },
    /// Compare completed runs.
    Compare {
        #[arg(num_args = 1..)]
        dirs: Vec<PathBuf>,
    },
    /// Evaluate one checkpoint file on a suite config's tasks.
    Eval { checkpoint: PathBuf, suite: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let opts = RunOptions { out: cli.out, seed: cli.seed, jobs: cli.jobs, force: cli.force };
    let mut stdout = std::io::stdout();
    let result = match &cli.command {
        Command::Run { config } => run(config, &opts, &mut stdout).map(|_| ()),
        Command::Compare { dirs } => compare(dirs, opts.out.as_deref(), &mut stdout).map(|_| ()),
        Command::Eval { checkpoint, suite } => eval_checkpoint(checkpoint, suite, &opts, &mut stdout).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
