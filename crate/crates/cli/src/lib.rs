//! Command-line front end for the knowledge-tracing experiments.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod svg;

use clap::{Parser, Subcommand};

pub use config::{CommonArgs, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "ikt", version, about = "Continual knowledge tracing across schools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse raw interactions, split by school and write a cache.
    Ingest(CommonArgs),
    /// Per-school learner, problem and response counts.
    Stats(CommonArgs),
    /// Train and evaluate on a single school.
    Train(CommonArgs),
    /// Train sequentially over schools, evaluating every seen school after each stage.
    Scenario(CommonArgs),
    /// Independent models per school, each evaluated on every school.
    Disjoint(CommonArgs),
    /// One model on the pooled schools.
    Joint(CommonArgs),
    /// Two-task scenarios measuring the change on the first task.
    Ablation(CommonArgs),
    /// Embed learners in 2-D and score school mixing.
    Tsne(CommonArgs),
    /// Summarise the results found in the output directory.
    Report(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Scenario(_) => "scenario",
            Command::Disjoint(_) => "disjoint",
            Command::Joint(_) => "joint",
            Command::Ablation(_) => "ablation",
            Command::Tsne(_) => "tsne",
            Command::Report(_) => "report",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Ingest(a)
            | Command::Stats(a)
            | Command::Train(a)
            | Command::Scenario(a)
            | Command::Disjoint(a)
            | Command::Joint(a)
            | Command::Ablation(a)
            | Command::Tsne(a)
            | Command::Report(a) => a,
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = RunConfig::resolve(cli.command.args())?;
    match &cli.command {
        Command::Ingest(_) => commands::ingest(&cfg),
        Command::Stats(_) => commands::stats(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Scenario(_) => commands::scenario(&cfg),
        Command::Disjoint(_) => commands::disjoint(&cfg),
        Command::Joint(_) => commands::joint(&cfg),
        Command::Ablation(_) => commands::ablation(&cfg),
        Command::Tsne(_) => commands::tsne(&cfg),
        Command::Report(_) => commands::report(&cfg),
    }
}
