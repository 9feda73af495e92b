use std::path::{Path, PathBuf};

use clap::Args;
use pathcot::dataset::{assemble_rounds, attach_tags, dataset_stats, emit_conversation, CotRound, RoundTags};
use pathcot::gateway::CRC_LN_TASK;
use pathcot::images::{CropRequest, FileImageProvider, ImageProvider};
use pathcot::log::{parse_session_log, SessionLog};
use pathcot::review::{Rationale, RecordedDecision, TaskSpec};
use pathcot::segmenter::VlmAction;
use pathcot_review_server::{SessionManifest, SessionStore};
use serde::Deserialize;

use crate::io::{list_files, read_json, read_jsonl, read_text, write_jsonl, write_text, CmdResult, Failure};

/// A drafted rationale for one action, keyed by its index in actions.json.
#[derive(Debug, Deserialize)]
struct DraftRow {
    action_id: usize,
    thumbnail_impression: String,
    why_zoom: String,
    findings: String,
}

#[derive(Debug, Deserialize)]
struct TagRow {
    action_id: usize,
    #[serde(flatten)]
    tags: RoundTags,
}

fn load_session(path: &Path) -> CmdResult<SessionLog> {
    parse_session_log(&read_text(path)?).map_err(|e| Failure::schema(format!("{}: {e}", path.display())))
}

fn load_drafts(path: &Path) -> CmdResult<Vec<(usize, Rationale)>> {
    let rows: Vec<DraftRow> = read_json(path)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.action_id, Rationale::draft(&r.thumbnail_impression, &r.why_zoom, &r.findings)))
        .collect())
}

fn open_images(dir: &Option<PathBuf>) -> CmdResult<Option<FileImageProvider>> {
    dir.as_ref().map(|d| FileImageProvider::open(d).map_err(Failure::failed)).transpose()
}

#[derive(Debug, Args)]
pub struct ReviewTasksArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    actions: PathBuf,
    #[arg(long)]
    rationales: PathBuf,
    /// Image root holding `crops/{slide}/...`.
    #[arg(long)]
    images: PathBuf,
    /// Review data directory; the session is created under `sessions/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "reviewer")]
    reviewer: String,
    /// Longest time charged to one task, in seconds.
    #[arg(long)]
    idle_timeout_s: Option<u64>,
}

/// One review task per action, in action order, so the review export's
/// `roi_index` is the action id.
pub fn review_tasks(args: ReviewTasksArgs) -> CmdResult {
    let log = load_session(&args.session)?;
    let actions: Vec<VlmAction> = read_json(&args.actions)?;
    let mut drafts = load_drafts(&args.rationales)?;
    drafts.sort_by_key(|(id, _)| *id);
    if drafts.iter().map(|(id, _)| *id).ne(0..actions.len()) {
        return Err(Failure::schema("rationales must cover each action id exactly once"));
    }
    let images = FileImageProvider::open(&args.images).map_err(Failure::failed)?;
    let slide = &log.slide.slide_id;
    let thumbnail = images.get_thumbnail(slide).map_err(Failure::failed)?;
    let mut tasks = Vec::with_capacity(actions.len());
    for (action, (_, draft)) in actions.iter().zip(drafts) {
        let roi_crop = images.get_crop(&CropRequest::new(slide, action.bbox)).map_err(Failure::failed)?;
        tasks.push(TaskSpec {
            case_id: slide.clone(),
            thumbnail: thumbnail.clone(),
            roi_box: action.bbox,
            roi_crop,
            cyto_crop: None,
            draft,
        });
    }
    let manifest = SessionManifest {
        reviewer_id: args.reviewer,
        idle_timeout_ms: args.idle_timeout_s.map(|s| s * 1000),
        tasks,
    };
    SessionStore::new(&args.data).create(&log.session_id, &manifest).map_err(Failure::failed)?;
    tracing::info!(session = %log.session_id, tasks = manifest.tasks.len(), "review session created");
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Session log the actions came from (ids and slide metadata).
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    actions: PathBuf,
    #[arg(long)]
    rationales: PathBuf,
    /// Review export (JSONL of recorded decisions, `roi_index` = action id).
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Image root; when given, conversation image links carry hashes.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value = CRC_LN_TASK)]
    task: String,
    #[arg(long)]
    out: PathBuf,
}

/// Writes `rounds/{session}.jsonl`, `audit/{session}.jsonl` and
/// `conversations/{session}.json` under the output directory.
pub fn build_dataset(args: BuildDatasetArgs) -> CmdResult {
    let log = load_session(&args.session)?;
    let actions: Vec<VlmAction> = read_json(&args.actions)?;
    let drafts = load_drafts(&args.rationales)?;
    let recorded: Vec<RecordedDecision> = read_jsonl(&args.decisions)?;
    let decisions: Vec<_> = recorded.into_iter().map(|d| (d.roi_index, d.decision)).collect();
    let mut rounds = assemble_rounds(&log.session_id, &log.pathologist_id, &actions, &drafts, &decisions)
        .map_err(Failure::schema)?;
    if let Some(path) = &args.tags {
        let rows: Vec<TagRow> = read_json(path)?;
        let tags: Vec<_> = rows.into_iter().map(|r| (r.action_id, r.tags)).collect();
        attach_tags(&mut rounds.training, &tags);
        attach_tags(&mut rounds.audit, &tags);
    }
    let images = open_images(&args.images)?;
    let id = &log.session_id;
    write_jsonl(&args.out.join("rounds").join(format!("{id}.jsonl")), &rounds.training)?;
    write_jsonl(&args.out.join("audit").join(format!("{id}.jsonl")), &rounds.audit)?;
    let doc = emit_conversation(id, &rounds.training, &log.slide, &args.task, images.as_ref().map(|p| p as &dyn ImageProvider));
    write_text(&args.out.join("conversations").join(format!("{id}.json")), &doc)?;
    tracing::info!(session = %id, training = rounds.training.len(), audit = rounds.audit.len(), "dataset written");
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn stats(args: StatsArgs) -> CmdResult {
    let mut rounds: Vec<CotRound> = Vec::new();
    for file in list_files(&args.dataset.join("rounds"), "jsonl")? {
        rounds.extend(read_jsonl::<CotRound>(&file)?);
    }
    crate::io::write_json(&args.out, &dataset_stats(&rounds))
}
