//! `voxkd`: train, distill, and evaluate sparse voxel segmentation
//! networks from the command line.
//!
//! Every subcommand is a deterministic function of its inputs: rerunning
//! with the same configuration and seed reproduces the same artifacts byte
//! for byte. Failures exit nonzero with a single `error: ...` line on
//! stderr.

mod args;
mod commands;
mod threads;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(&args),
        Command::TrainTeacher(args) => commands::train::run_supervised(&args),
        Command::Distill(args) => commands::train::run_distill(&args),
        Command::Eval(args) => commands::eval::run(&args),
        Command::Inspect(args) => commands::inspect::run(&args),
        Command::Gradcheck(args) => commands::gradcheck::run(&args),
        Command::Report(args) => commands::report::run(&args),
    };
    if let Err(e) = result {
        // One machine-parseable line, however deep the cause chain goes.
        let line = format!("{e:#}").replace('\n', "; ");
        eprintln!("error: {line}");
        std::process::exit(1);
    }
}
