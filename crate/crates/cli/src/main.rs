mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Outcome;

#[derive(Parser)]
#[command(name = "promptlab", version, about = "Property suites, constructed transformers and attention benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config for the subcommand; flags given here override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the JSON report (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Key-query scale profile for the attention construction.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized Boltzmann-operator property suites.
    BoltzCheck(commands::BoltzArgs),
    /// Build contextual-mapping heads and verify their context IDs.
    Contextual(commands::ContextualArgs),
    /// Memorize a dataset with a constructed transformer and a grid prompt.
    Memorize(commands::MemorizeArgs),
    /// Time exact against low-rank attention over an (n, B) sweep.
    AptiBench(commands::BenchArgs),
    /// The B sweep at fixed n, with the crossover summary.
    PhaseDiagram(commands::BenchArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BoltzCheck(a) => commands::boltz_check(&cli.common, &a),
        Command::Contextual(a) => commands::contextual(&cli.common, &a),
        Command::Memorize(a) => commands::memorize(&cli.common, &a),
        Command::AptiBench(a) => commands::apti_bench(&cli.common, &a, false),
        Command::PhaseDiagram(a) => commands::apti_bench(&cli.common, &a, true),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Ok(Outcome::InputError) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
