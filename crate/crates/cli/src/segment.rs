use std::path::PathBuf;

use clap::Args;
use pathcot::log::parse_session_log;
use pathcot::segmenter::{run_pipeline, SegmenterConfig};

use crate::io::{read_json, read_text, write_json, CmdResult, Failure};

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Session log (JSONL: header line, then one viewport sample per line).
    #[arg(long)]
    input: PathBuf,
    /// Segmenter settings; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

pub fn run(args: SegmentArgs) -> CmdResult {
    let cfg: SegmenterConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SegmenterConfig::default(),
    };
    let text = read_text(&args.input)?;
    let log = parse_session_log(&text).map_err(|e| Failure::schema(format!("{}: {e}", args.input.display())))?;
    let actions = run_pipeline(&log, &cfg).map_err(Failure::schema)?;
    tracing::info!(session = %log.session_id, events = log.events.len(), actions = actions.len(), "segmented");
    write_json(&args.output, &actions)
}
