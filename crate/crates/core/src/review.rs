//! Expert review of model-drafted rationales.
//!
//! Drafts are split into sentences; a reviewer deletes or rewrites sentences
//! and accepts, or rejects the region outright. A [`ReviewSession`] is an
//! append-only event log plus the state derived from it, so replaying the log
//! always rebuilds the same state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::images::ImageRef;
use crate::metrics::{TimingMode, TimingRecord};

/// Lower-case tokens ending in a period that never close a sentence.
const ABBREVIATIONS: &[&str] = &[
    "vs.", "e.g.", "i.e.", "no.", "nos.", "dr.", "fig.", "figs.", "cf.", "approx.", "al.", "ca.",
];

fn guarded(text: &str, term_start: usize) -> bool {
    let word_start = text[..term_start]
        .rfind(char::is_whitespace)
        .map(|i| i + text[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let end = term_start + 1;
    let word = text[word_start..end].trim_start_matches(['(', '[', '"', '\'']);
    ABBREVIATIONS.iter().any(|a| word.eq_ignore_ascii_case(a))
}

/// Splits text into sentences. Concatenating the pieces gives back the input
/// exactly; each piece carries its trailing whitespace.
///
/// A boundary follows a run of `.`, `!` or `?` when the next non-space
/// character is an upper-case letter, unless the word before a `.` is a
/// known abbreviation.
pub fn sentence_segment(text: &str) -> Vec<String> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if !matches!(bytes[i], b'.' | b'!' | b'?') {
            i += 1;
            continue;
        }
        let term_start = i;
        while i < bytes.len() && matches!(bytes[i], b'.' | b'!' | b'?') {
            i += 1;
        }
        let rest = &text[i..];
        let trimmed = rest.trim_start();
        if trimmed.len() == rest.len() {
            continue;
        }
        let next_upper = trimmed.chars().next().is_some_and(char::is_uppercase);
        if !next_upper || (bytes[term_start] == b'.' && guarded(text, term_start)) {
            continue;
        }
        let end = i + (rest.len() - trimmed.len());
        out.push(text[start..end].to_string());
        start = end;
        i = end;
    }
    if start < text.len() {
        out.push(text[start..].to_string());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSource {
    ModelDraft,
    ExpertEdited,
}

/// The three text panels of one region plus their sentence segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub thumbnail_impression: String,
    pub why_zoom: String,
    pub findings: String,
    /// Sentences of the three fields, in field order.
    pub sentences: Vec<String>,
    pub source: RationaleSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEdit {
    pub index: usize,
    pub text: String,
}

impl Rationale {
    pub fn new(
        thumbnail_impression: impl Into<String>,
        why_zoom: impl Into<String>,
        findings: impl Into<String>,
        source: RationaleSource,
    ) -> Self {
        let (thumbnail_impression, why_zoom, findings) =
            (thumbnail_impression.into(), why_zoom.into(), findings.into());
        let sentences = [&thumbnail_impression, &why_zoom, &findings]
            .into_iter()
            .flat_map(|f| sentence_segment(f))
            .collect();
        Self { thumbnail_impression, why_zoom, findings, sentences, source }
    }

    pub fn draft(thumbnail_impression: &str, why_zoom: &str, findings: &str) -> Self {
        Self::new(thumbnail_impression, why_zoom, findings, RationaleSource::ModelDraft)
    }

    fn fields(&self) -> [&str; 3] {
        [&self.thumbnail_impression, &self.why_zoom, &self.findings]
    }

    pub fn word_count(&self) -> usize {
        self.fields().iter().map(|f| f.split_whitespace().count()).sum()
    }

    /// Checks deletion and edit indices against the sentence list.
    pub fn check_review(&self, deleted: &[usize], edits: &[SentenceEdit]) -> Result<(), ReviewError> {
        let n = self.sentences.len();
        let mut seen = vec![false; n];
        for &i in deleted.iter().chain(edits.iter().map(|e| &e.index)) {
            if i >= n {
                return Err(ReviewError::InvalidIndices(format!("index {i} out of range for {n} sentences")));
            }
            if seen[i] {
                return Err(ReviewError::InvalidIndices(format!("index {i} given more than once")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// True when applying the review would change the text.
    pub fn review_changes(&self, deleted: &[usize], edits: &[SentenceEdit]) -> bool {
        !deleted.is_empty()
            || edits
                .iter()
                .any(|e| self.sentences.get(e.index).is_some_and(|s| s.trim() != e.text.trim()))
    }

    /// Applies deletions and in-place edits. An edit keeps the original
    /// sentence's trailing whitespace; an edit to empty text deletes. With
    /// no effective change the rationale is returned unchanged.
    pub fn apply_review(&self, deleted: &[usize], edits: &[SentenceEdit]) -> Result<Rationale, ReviewError> {
        self.check_review(deleted, edits)?;
        if !self.review_changes(deleted, edits) {
            return Ok(self.clone());
        }
        let mut index = 0;
        let mut fields = Vec::with_capacity(3);
        for field in self.fields() {
            let mut rebuilt = String::new();
            for sentence in sentence_segment(field) {
                let i = index;
                index += 1;
                if deleted.contains(&i) {
                    continue;
                }
                match edits.iter().find(|e| e.index == i) {
                    Some(edit) => {
                        let body = edit.text.trim();
                        if body.is_empty() {
                            continue;
                        }
                        rebuilt.push_str(body);
                        rebuilt.push_str(&sentence[sentence.trim_end().len()..]);
                    }
                    None => rebuilt.push_str(&sentence),
                }
            }
            fields.push(rebuilt);
        }
        let [a, b, c]: [String; 3] = fields.try_into().expect("three fields");
        Ok(Rationale::new(a, b, c, RationaleSource::ExpertEdited))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub verdict: Verdict,
    #[serde(default)]
    pub deleted_sentence_indices: Vec<usize>,
    #[serde(default)]
    pub edited_sentences: Vec<SentenceEdit>,
    pub edit_durations_ms: u64,
    pub reviewer_id: String,
}

impl ReviewDecision {
    /// The rationale that survives review, or `None` for a rejection.
    pub fn final_rationale(&self, draft: &Rationale) -> Result<Option<Rationale>, ReviewError> {
        match self.verdict {
            Verdict::Rejected => Ok(None),
            _ => draft
                .apply_review(&self.deleted_sentence_indices, &self.edited_sentences)
                .map(Some),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReviewError {
    #[error("no pending tasks")]
    NoPendingTasks,
    #[error("task `{0}` is not the open task")]
    StaleTask(String),
    #[error("invalid sentence indices: {0}")]
    InvalidIndices(String),
    #[error("inconsistent review log: {0}")]
    CorruptLog(String),
}

/// One region queued for review, as stored in a session's task list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub case_id: String,
    pub thumbnail: ImageRef,
    pub roi_box: BBox,
    pub roi_crop: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyto_crop: Option<ImageRef>,
    pub draft: Rationale,
}

/// What the reviewer sees for the open task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub case_id: String,
    pub roi_index: usize,
    pub roi_count: usize,
    pub progress: String,
    pub thumbnail: ImageRef,
    pub roi_box: BBox,
    pub roi_crop: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyto_crop: Option<ImageRef>,
    pub draft: Rationale,
    pub served_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub task_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_sentences: Vec<SentenceEdit>,
    #[serde(default)]
    pub deleted_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    TaskServed { task_id: String, roi_index: usize, at_ms: u64 },
    DecisionRecorded { task_id: String, roi_index: usize, decision: ReviewDecision, at_ms: u64 },
}

/// A decision with everything derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedDecision {
    pub task_id: String,
    pub case_id: String,
    pub roi_index: usize,
    pub decision: ReviewDecision,
    pub final_rationale: Option<Rationale>,
    pub timing: Option<TimingRecord>,
    pub decided_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenTask {
    pub task_id: String,
    pub roi_index: usize,
    pub served_at_ms: u64,
}

/// Everything derivable from the event log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewState {
    pub open: Option<OpenTask>,
    pub decisions: BTreeMap<usize, RecordedDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSession {
    session_id: String,
    reviewer_id: String,
    tasks: Vec<TaskSpec>,
    /// Caps a recorded duration, so a task left open overnight does not
    /// count as review time.
    idle_timeout_ms: Option<u64>,
    events: Vec<ReviewEvent>,
    state: ReviewState,
}

impl ReviewSession {
    pub fn new(session_id: impl Into<String>, reviewer_id: impl Into<String>, tasks: Vec<TaskSpec>) -> Self {
        Self {
            session_id: session_id.into(),
            reviewer_id: reviewer_id.into(),
            tasks,
            idle_timeout_ms: None,
            events: Vec::new(),
            state: ReviewState::default(),
        }
    }

    pub fn with_idle_timeout(mut self, timeout_ms: Option<u64>) -> Self {
        self.idle_timeout_ms = timeout_ms;
        self
    }

    /// Rebuilds a session from its log.
    pub fn replay(mut self, events: impl IntoIterator<Item = ReviewEvent>) -> Result<Self, ReviewError> {
        for event in events {
            self.apply(event)?;
        }
        Ok(self)
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn events(&self) -> &[ReviewEvent] {
        &self.events
    }

    pub fn state(&self) -> &ReviewState {
        &self.state
    }

    pub fn decisions(&self) -> impl Iterator<Item = &RecordedDecision> {
        self.state.decisions.values()
    }

    fn task_id(&self, roi_index: usize) -> String {
        format!("{}:{}", self.session_id, roi_index)
    }

    fn view(&self, open: &OpenTask) -> ReviewTask {
        let spec = &self.tasks[open.roi_index];
        ReviewTask {
            task_id: open.task_id.clone(),
            case_id: spec.case_id.clone(),
            roi_index: open.roi_index,
            roi_count: self.tasks.len(),
            progress: format!("{} of {}", open.roi_index + 1, self.tasks.len()),
            thumbnail: spec.thumbnail.clone(),
            roi_box: spec.roi_box,
            roi_crop: spec.roi_crop.clone(),
            cyto_crop: spec.cyto_crop.clone(),
            draft: spec.draft.clone(),
            served_at_ms: open.served_at_ms,
        }
    }

    /// The open task, or the lowest undecided one with its timer started.
    pub fn next_task(&mut self, now_ms: u64) -> Result<ReviewTask, ReviewError> {
        if let Some(open) = &self.state.open {
            return Ok(self.view(open));
        }
        let roi_index = (0..self.tasks.len())
            .find(|i| !self.state.decisions.contains_key(i))
            .ok_or(ReviewError::NoPendingTasks)?;
        let task_id = self.task_id(roi_index);
        self.apply(ReviewEvent::TaskServed { task_id, roi_index, at_ms: now_ms })?;
        let open = self.state.open.as_ref().expect("just served");
        Ok(self.view(open))
    }

    /// Records a verdict for the open task. The stored verdict follows the
    /// text: an accept that changed something is recorded as edited, and an
    /// edit that changed nothing as accepted.
    pub fn submit_decision(&mut self, req: &DecisionRequest, now_ms: u64) -> Result<RecordedDecision, ReviewError> {
        let open = match &self.state.open {
            Some(open) if open.task_id == req.task_id => open.clone(),
            _ => return Err(ReviewError::StaleTask(req.task_id.clone())),
        };
        let draft = &self.tasks[open.roi_index].draft;
        let (deleted, edits) = match req.verdict {
            Verdict::Rejected => (Vec::new(), Vec::new()),
            _ => (req.deleted_indices.clone(), req.edited_sentences.clone()),
        };
        draft.check_review(&deleted, &edits)?;
        let verdict = match req.verdict {
            Verdict::Rejected => Verdict::Rejected,
            _ if draft.review_changes(&deleted, &edits) => Verdict::Edited,
            _ => Verdict::Accepted,
        };
        let mut elapsed = now_ms.saturating_sub(open.served_at_ms);
        if let Some(cap) = self.idle_timeout_ms {
            elapsed = elapsed.min(cap);
        }
        let decision = ReviewDecision {
            verdict,
            deleted_sentence_indices: deleted,
            edited_sentences: edits,
            edit_durations_ms: elapsed,
            reviewer_id: self.reviewer_id.clone(),
        };
        self.apply(ReviewEvent::DecisionRecorded {
            task_id: open.task_id,
            roi_index: open.roi_index,
            decision,
            at_ms: now_ms,
        })?;
        Ok(self.state.decisions[&open.roi_index].clone())
    }

    fn apply(&mut self, event: ReviewEvent) -> Result<(), ReviewError> {
        let corrupt = |m: String| ReviewError::CorruptLog(m);
        match &event {
            ReviewEvent::TaskServed { task_id, roi_index, at_ms } => {
                if self.state.open.is_some() {
                    return Err(corrupt(format!("{task_id} served while another task is open")));
                }
                if *roi_index >= self.tasks.len() || self.state.decisions.contains_key(roi_index) {
                    return Err(corrupt(format!("{task_id} is not a pending task")));
                }
                self.state.open = Some(OpenTask {
                    task_id: task_id.clone(),
                    roi_index: *roi_index,
                    served_at_ms: *at_ms,
                });
            }
            ReviewEvent::DecisionRecorded { task_id, roi_index, decision, at_ms } => {
                match &self.state.open {
                    Some(open) if open.task_id == *task_id && open.roi_index == *roi_index => {}
                    _ => return Err(corrupt(format!("decision for {task_id} without an open task"))),
                }
                let spec = &self.tasks[*roi_index];
                let final_rationale = decision.final_rationale(&spec.draft)?;
                let mode = match decision.verdict {
                    Verdict::Accepted => Some(TimingMode::Verify),
                    Verdict::Edited => Some(TimingMode::Revise),
                    Verdict::Rejected => None,
                };
                let timing = mode.map(|mode| TimingRecord {
                    round_id: task_id.clone(),
                    mode,
                    t_write_ms: decision.edit_durations_ms,
                    t_nav_expert_ms: None,
                });
                self.state.decisions.insert(
                    *roi_index,
                    RecordedDecision {
                        task_id: task_id.clone(),
                        case_id: spec.case_id.clone(),
                        roi_index: *roi_index,
                        decision: decision.clone(),
                        final_rationale,
                        timing,
                        decided_at_ms: *at_ms,
                    },
                );
                self.state.open = None;
            }
        }
        self.events.push(event);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_examples() {
        assert_eq!(sentence_segment("Tumor present. Capsule intact."), ["Tumor present. ", "Capsule intact."]);
        assert_eq!(
            sentence_segment("Cells are atypical, e.g. Signet ring forms are seen."),
            ["Cells are atypical, e.g. Signet ring forms are seen."]
        );
        assert_eq!(
            sentence_segment("Cells are atypical, e.g. signet ring forms are seen."),
            ["Cells are atypical, e.g. signet ring forms are seen."]
        );
        assert!(sentence_segment("").is_empty());
        assert!(sentence_segment("  \n").is_empty());
    }

    #[test]
    fn segment_guards_and_terminators() {
        assert_eq!(sentence_segment("Compare No. 3 with No. 4. Done"), ["Compare No. 3 with No. 4. ", "Done"]);
        assert_eq!(sentence_segment("Size 2.5 mm. Next!? Yes"), ["Size 2.5 mm. ", "Next!? ", "Yes"]);
        assert_eq!(sentence_segment("lower. case stays"), ["lower. case stays"]);
        assert_eq!(sentence_segment("Tumor vs. Stroma."), ["Tumor vs. Stroma."]);
    }

    fn draft() -> Rationale {
        Rationale::draft(
            "Node with a thin capsule. Sinuses open. ",
            "Dense focus at the hilum. ",
            "Glands with atypia. Necrosis present. No sinus histiocytes.",
        )
    }

    #[test]
    fn sentences_partition_fields() {
        let d = draft();
        assert_eq!(d.sentences.len(), 6);
        assert_eq!(d.sentences.concat(), format!("{}{}{}", d.thumbnail_impression, d.why_zoom, d.findings));
    }

    #[test]
    fn accept_without_edits_is_identity() {
        let d = draft();
        assert_eq!(d.apply_review(&[], &[]).unwrap(), d);
        let noop = [SentenceEdit { index: 1, text: "  Sinuses open.".into() }];
        assert_eq!(d.apply_review(&[], &noop).unwrap(), d);
    }

    #[test]
    fn delete_and_edit() {
        let d = draft();
        let edits = [SentenceEdit { index: 2, text: "Dense focus near the hilum.".into() }];
        let r = d.apply_review(&[4], &edits).unwrap();
        assert_eq!(r.thumbnail_impression, d.thumbnail_impression);
        assert_eq!(r.why_zoom, "Dense focus near the hilum. ");
        assert_eq!(r.findings, "Glands with atypia. No sinus histiocytes.");
        assert_eq!(r.source, RationaleSource::ExpertEdited);
        assert_eq!(r.sentences.len(), 5);
    }

    #[test]
    fn bad_indices() {
        let d = draft();
        assert!(matches!(d.apply_review(&[6], &[]), Err(ReviewError::InvalidIndices(_))));
        assert!(matches!(d.apply_review(&[1, 1], &[]), Err(ReviewError::InvalidIndices(_))));
        let e = [SentenceEdit { index: 1, text: "x".into() }];
        assert!(matches!(d.apply_review(&[1], &e), Err(ReviewError::InvalidIndices(_))));
    }

    fn image(p: &str) -> ImageRef {
        ImageRef { path: p.into(), width: 1024, height: 1024, content_hash: p.into() }
    }

    pub(crate) fn session(n: usize) -> ReviewSession {
        let tasks = (0..n)
            .map(|i| TaskSpec {
                case_id: "case1".into(),
                thumbnail: image("t"),
                roi_box: BBox::new(i as f64 * 100.0, 0.0, 100.0, 100.0),
                roi_crop: image(&format!("r{i}")),
                cyto_crop: None,
                draft: draft(),
            })
            .collect();
        ReviewSession::new("s1", "rev1", tasks)
    }

    fn decide(verdict: Verdict, task_id: &str, deleted: Vec<usize>) -> DecisionRequest {
        DecisionRequest { task_id: task_id.into(), verdict, edited_sentences: vec![], deleted_indices: deleted }
    }

    #[test]
    fn task_flow() {
        let mut s = session(5);
        let t = s.next_task(1_000).unwrap();
        assert_eq!((t.roi_index, t.progress.as_str()), (0, "1 of 5"));
        assert_eq!(s.next_task(5_000).unwrap().served_at_ms, 1_000);

        let rec = s.submit_decision(&decide(Verdict::Accepted, &t.task_id, vec![]), 13_000).unwrap();
        let timing = rec.timing.unwrap();
        assert_eq!((timing.mode, timing.t_write_ms), (TimingMode::Verify, 12_000));
        assert_eq!(rec.final_rationale.as_ref(), Some(&draft()));

        assert_eq!(
            s.submit_decision(&decide(Verdict::Accepted, &t.task_id, vec![]), 14_000),
            Err(ReviewError::StaleTask(t.task_id.clone()))
        );

        let t1 = s.next_task(14_000).unwrap();
        assert_eq!(t1.roi_index, 1);
        let rec = s.submit_decision(&decide(Verdict::Accepted, &t1.task_id, vec![3]), 20_000).unwrap();
        assert_eq!(rec.decision.verdict, Verdict::Edited);
        assert_eq!(rec.decision.deleted_sentence_indices, [3]);
        assert_eq!(rec.timing.unwrap().mode, TimingMode::Revise);

        let t2 = s.next_task(20_000).unwrap();
        let rec = s.submit_decision(&decide(Verdict::Rejected, &t2.task_id, vec![1]), 21_000).unwrap();
        assert!(rec.final_rationale.is_none() && rec.timing.is_none());
        assert!(rec.decision.deleted_sentence_indices.is_empty());

        for _ in 3..5 {
            let t = s.next_task(0).unwrap();
            s.submit_decision(&decide(Verdict::Edited, &t.task_id, vec![]), 0).unwrap();
        }
        assert_eq!(s.next_task(0), Err(ReviewError::NoPendingTasks));
        assert_eq!(s.state().decisions[&3].decision.verdict, Verdict::Accepted);
    }

    #[test]
    fn invalid_indices_leave_task_open() {
        let mut s = session(2);
        let t = s.next_task(0).unwrap();
        let err = s.submit_decision(&decide(Verdict::Accepted, &t.task_id, vec![9]), 10).unwrap_err();
        assert!(matches!(err, ReviewError::InvalidIndices(_)));
        assert_eq!(s.state().open.as_ref().unwrap().task_id, t.task_id);
    }

    #[test]
    fn idle_timeout_caps_duration() {
        let mut s = session(1).with_idle_timeout(Some(60_000));
        let t = s.next_task(0).unwrap();
        let rec = s.submit_decision(&decide(Verdict::Accepted, &t.task_id, vec![]), 3_600_000).unwrap();
        assert_eq!(rec.decision.edit_durations_ms, 60_000);
    }

    #[test]
    fn replay_rebuilds_state() {
        let mut s = session(3);
        let t = s.next_task(5).unwrap();
        s.submit_decision(&decide(Verdict::Accepted, &t.task_id, vec![0, 2]), 50).unwrap();
        s.next_task(60).unwrap();
        let replayed = session(3).replay(s.events().to_vec()).unwrap();
        assert_eq!(replayed, s);

        let bogus = vec![ReviewEvent::DecisionRecorded {
            task_id: "s1:0".into(),
            roi_index: 0,
            decision: s.state().decisions[&0].decision.clone(),
            at_ms: 0,
        }];
        assert!(matches!(session(3).replay(bogus), Err(ReviewError::CorruptLog(_))));
    }
}
