//! Command-line driver: invert an image into a run archive, then edit,
//! visualize and evaluate from that archive without re-running inversion.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dynprompt", version, about = "Dynamic prompt learning for attention-controlled image editing")]
pub struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert an image and learn per-step noun tokens and null embeddings.
    #[command(alias = "dpl-invert")]
    Invert(commands::invert::InvertArgs),
    /// Edit a learned run by attention injection.
    Edit(commands::edit::EditArgs),
    /// Render attention grids and the background overlay of a run.
    Viz(commands::viz::VizArgs),
    /// IoU-vs-threshold curves against ground-truth masks.
    Eval(commands::eval::EvalArgs),
    /// Write the planted two-object fixture as an input image plus masks.
    SynthScene(commands::synth::SynthArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Invert(a) => commands::invert::run(&a).map(|_| ()),
        Command::Edit(a) => commands::edit::run(&a).map(|_| ()),
        Command::Viz(a) => commands::viz::run(&a).map(|_| ()),
        Command::Eval(a) => commands::eval::run(&a).map(|_| ()),
        Command::SynthScene(a) => commands::synth::run(&a).map(|_| ()),
    }
}
