use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avfusion_cli::commands;
use avfusion_cli::config::{self, Sources};
use avfusion_cli::Result;

#[derive(Parser)]
#[command(name = "avfusion", version, about = "Train and evaluate audiovisual fusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file (nested sections or dotted keys).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set fusion.kind=IA`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Evaluation settings, e.g. `AV,A,V,NA,NV`.
    #[arg(long, value_name = "LIST")]
    settings: Option<String>,
}

impl Common {
    fn sources(self) -> Sources {
        Sources {
            file: self.config,
            sets: self.sets,
            seed: self.seed,
            out: self.out,
            settings: self.settings,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory to the run directory.
    Generate(Common),
    /// Train a model; writes checkpoint.bin, history.csv and config.json.
    Train(Common),
    /// Evaluate a checkpoint under test settings; writes report.csv/.txt.
    Eval(Common),
    /// Finite-difference check of every layer and model variant.
    Gradcheck(Common),
    /// Merge report CSVs into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => commands::generate(&config::resolve(&c.sources())?).map(drop),
        Command::Train(c) => commands::train(&config::resolve(&c.sources())?).map(drop),
        Command::Eval(c) => commands::eval(&config::resolve(&c.sources())?).map(drop),
        Command::Gradcheck(c) => commands::gradcheck(&config::resolve(&c.sources())?).map(drop),
        Command::Report { inputs, out } => commands::report(&inputs, &out).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
