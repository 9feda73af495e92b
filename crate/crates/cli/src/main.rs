//! `pathcot`: segment viewer sessions, build and summarize the rationale
//! dataset, run diagnosis cases, evaluate them, and serve expert review.

mod dataset;
mod diagnose;
mod evaluate;
mod http_endpoint;
mod io;
mod segment;
mod serve;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "pathcot", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Turn a session log into standardized inspect/peek actions.
    Segment(segment::SegmentArgs),
    /// Create a review session from actions and drafted rationales.
    ReviewTasks(dataset::ReviewTasksArgs),
    /// Join actions, drafts and review decisions into dataset rounds.
    BuildDataset(dataset::BuildDatasetArgs),
    /// Summary counts for a dataset directory.
    Stats(dataset::StatsArgs),
    /// Run the diagnostic agent on one slide.
    Diagnose(diagnose::DiagnoseArgs),
    /// Run one slide under several region orders and caps.
    Ablate(diagnose::AblateArgs),
    /// Score case results against expert references.
    Evaluate(evaluate::EvaluateArgs),
    /// Summarize review and manual-writing times.
    Timing(evaluate::TimingArgs),
    /// Serve the review API.
    ServeReview(serve::ServeArgs),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Segment(a) => segment::run(a),
        Cmd::ReviewTasks(a) => dataset::review_tasks(a),
        Cmd::BuildDataset(a) => dataset::build_dataset(a),
        Cmd::Stats(a) => dataset::stats(a),
        Cmd::Diagnose(a) => diagnose::diagnose(a),
        Cmd::Ablate(a) => diagnose::ablate(a),
        Cmd::Evaluate(a) => evaluate::evaluate(a),
        Cmd::Timing(a) => evaluate::timing(a),
        Cmd::ServeReview(a) => serve::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
