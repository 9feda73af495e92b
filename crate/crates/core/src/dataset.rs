//! Chain-of-thought rounds: standardized actions joined with their reviewed
//! rationales, the conversational export, and corpus statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::wrap_tagged;
use crate::geometry::BBox;
use crate::images::{crop_path, CropRequest, ImageProvider};
use crate::log::SlideMeta;
use crate::review::{Rationale, ReviewDecision, ReviewError, Verdict};
use crate::segmenter::{ActionKind, VlmAction};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("action {0} has no matching rationale or decision")]
    AlignmentError(usize),
    #[error("review of action {0} does not apply to its draft: {1}")]
    Review(usize, ReviewError),
}

/// Multi-label tags for a round: region-level for inspects, cell-level for
/// peeks (both may be present).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTags {
    #[serde(default)]
    pub box_tags: Vec<String>,
    #[serde(default)]
    pub cell_tags: Vec<String>,
}

/// One command with its rationale. The decide-to-zoom and describe-findings
/// halves of the exchange are stored together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRound {
    pub round_id: String,
    pub session_id: String,
    pub pathologist_id: String,
    pub action_id: usize,
    pub action: VlmAction,
    /// Reviewed text for kept rounds; the untouched draft for rejected ones.
    pub rationale: Rationale,
    pub decision: ReviewDecision,
    pub order_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<RoundTags>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssembledRounds {
    pub training: Vec<CotRound>,
    /// Rejected rounds, kept for auditing.
    pub audit: Vec<CotRound>,
}

fn keyed<T>(items: &[(usize, T)], n: usize) -> Result<Vec<&T>, DatasetError> {
    let mut slots: Vec<Option<&T>> = vec![None; n];
    for (id, item) in items {
        match slots.get_mut(*id) {
            Some(slot @ None) => *slot = Some(item),
            _ => return Err(DatasetError::AlignmentError(*id)),
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or(DatasetError::AlignmentError(id)))
        .collect()
}

/// Joins one session's actions with drafts and decisions keyed by action id
/// (the index into `actions`). Order indices follow action start time.
pub fn assemble_rounds(
    session_id: &str,
    pathologist_id: &str,
    actions: &[VlmAction],
    rationales: &[(usize, Rationale)],
    decisions: &[(usize, ReviewDecision)],
) -> Result<AssembledRounds, DatasetError> {
    let drafts = keyed(rationales, actions.len())?;
    let verdicts = keyed(decisions, actions.len())?;
    let mut order: Vec<usize> = (0..actions.len()).collect();
    order.sort_by_key(|&id| (actions[id].t_start_ms, id));

    let mut out = AssembledRounds::default();
    for (order_index, id) in order.into_iter().enumerate() {
        let decision = verdicts[id].clone();
        let rationale = decision
            .final_rationale(drafts[id])
            .map_err(|e| DatasetError::Review(id, e))?
            .unwrap_or_else(|| drafts[id].clone());
        let round = CotRound {
            round_id: format!("{session_id}:{id}"),
            session_id: session_id.to_string(),
            pathologist_id: pathologist_id.to_string(),
            action_id: id,
            action: actions[id].clone(),
            rationale,
            decision,
            order_index,
            tags: None,
        };
        if round.decision.verdict == Verdict::Rejected {
            out.audit.push(round);
        } else {
            out.training.push(round);
        }
    }
    Ok(out)
}

/// Sets tags by action id; ids without a round are ignored.
pub fn attach_tags(rounds: &mut [CotRound], tags: &[(usize, RoundTags)]) {
    for round in rounds {
        if let Some((_, t)) = tags.iter().find(|(id, _)| *id == round.action_id) {
            round.tags = Some(t.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Inspect,
    Peek,
}

impl Command {
    pub fn of(kind: ActionKind) -> Self {
        if kind.is_peek() {
            Command::Peek
        } else {
            Command::Inspect
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Command::Inspect => "inspect",
            Command::Peek => "peek",
        }
    }
}

/// `<{bin}x-{inspect|peek}>`; integral bins print without a decimal point.
pub fn command_token(bin: f64, command: Command) -> String {
    format!("<{bin}x-{}>", command.as_str())
}

pub fn parse_command_token(token: &str) -> Option<(f64, Command)> {
    let body = token.strip_prefix('<')?.strip_suffix('>')?;
    let (bin, kind) = body.split_once("x-")?;
    let command = match kind {
        "inspect" => Command::Inspect,
        "peek" => Command::Peek,
        _ => return None,
    };
    let bin: f64 = bin.parse().ok()?;
    (bin.is_finite() && bin > 0.0).then_some((bin, command))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLink {
    pub path: String,
    pub content_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ConversationTurn {
    System {
        text: String,
    },
    User {
        text: String,
        command: String,
        #[serde(rename = "box")]
        bbox: BBox,
        images: Vec<ImageLink>,
    },
    Model {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub session_id: String,
    pub slide: SlideMeta,
    pub turns: Vec<ConversationTurn>,
}

fn model_text(r: &Rationale) -> String {
    [
        wrap_tagged(r.thumbnail_impression.trim(), "impression"),
        wrap_tagged(r.why_zoom.trim(), "why_zoom"),
        wrap_tagged(r.findings.trim(), "findings"),
    ]
    .join("\n")
}

/// Builds the conversational record of one session, rounds in order. Image
/// links are crop paths; hashes are filled in when `images` knows the file.
pub fn build_conversation(
    session_id: &str,
    rounds: &[CotRound],
    slide: &SlideMeta,
    task: &str,
    images: Option<&dyn ImageProvider>,
) -> Conversation {
    let mut sorted: Vec<&CotRound> = rounds.iter().collect();
    sorted.sort_by_key(|r| (r.order_index, r.action_id));
    let mut turns = vec![ConversationTurn::System { text: task.to_string() }];
    for round in sorted {
        let a = &round.action;
        let command = command_token(a.magnification_bin, Command::of(a.kind));
        let hash = images
            .and_then(|p| p.get_crop(&CropRequest::new(&slide.slide_id, a.bbox)).ok())
            .map(|r| r.content_hash);
        let b = a.bbox;
        turns.push(ConversationTurn::User {
            text: format!("{command} [{}, {}, {}, {}]", b.x, b.y, b.w, b.h),
            command,
            bbox: b,
            images: vec![ImageLink { path: crop_path(&slide.slide_id, &b), content_hash: hash }],
        });
        turns.push(ConversationTurn::Model { text: model_text(&round.rationale) });
    }
    Conversation { session_id: session_id.to_string(), slide: slide.clone(), turns }
}

/// [`build_conversation`] serialized as pretty JSON.
pub fn emit_conversation(
    session_id: &str,
    rounds: &[CotRound],
    slide: &SlideMeta,
    task: &str,
    images: Option<&dyn ImageProvider>,
) -> String {
    let conv = build_conversation(session_id, rounds, slide, task, images);
    serde_json::to_string_pretty(&conv).expect("conversation serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub session_count: usize,
    pub round_count: usize,
    pub mean_words_inspect: Option<f64>,
    pub mean_words_peek: Option<f64>,
    pub per_pathologist: BTreeMap<String, usize>,
    pub per_kind: BTreeMap<ActionKind, usize>,
    pub per_command: BTreeMap<Command, usize>,
    /// Command to tag counts: inspects link to region tags, peeks to cell tags.
    pub sankey: Vec<SankeyLink>,
}

pub fn dataset_stats(rounds: &[CotRound]) -> DatasetStats {
    let sessions: BTreeSet<&str> = rounds.iter().map(|r| r.session_id.as_str()).collect();
    let mut per_pathologist = BTreeMap::new();
    let mut per_kind = BTreeMap::new();
    let mut per_command = BTreeMap::new();
    let mut words: BTreeMap<Command, (usize, usize)> = BTreeMap::new();
    let mut links: BTreeMap<(Command, String), usize> = BTreeMap::new();
    for r in rounds {
        let command = Command::of(r.action.kind);
        *per_pathologist.entry(r.pathologist_id.clone()).or_insert(0) += 1;
        *per_kind.entry(r.action.kind).or_insert(0) += 1;
        *per_command.entry(command).or_insert(0) += 1;
        let w = words.entry(command).or_insert((0, 0));
        w.0 += 1;
        w.1 += r.rationale.word_count();
        if let Some(tags) = &r.tags {
            let list = match command {
                Command::Inspect => &tags.box_tags,
                Command::Peek => &tags.cell_tags,
            };
            for tag in list {
                *links.entry((command, tag.clone())).or_insert(0) += 1;
            }
        }
    }
    let mean = |c| words.get(&c).map(|(n, total)| *total as f64 / *n as f64);
    DatasetStats {
        session_count: sessions.len(),
        round_count: rounds.len(),
        mean_words_inspect: mean(Command::Inspect),
        mean_words_peek: mean(Command::Peek),
        per_pathologist,
        per_kind,
        per_command,
        sankey: links
            .into_iter()
            .map(|((c, target), count)| SankeyLink { source: c.as_str().to_string(), target, count })
            .collect(),
    }
}
