mod common;

use pathcot::dataset::{
    assemble_rounds, dataset_stats, emit_conversation, parse_command_token, Command, Conversation, ConversationTurn,
    CotRound,
};
use pathcot::gateway::CRC_LN_TASK;
use pathcot::geometry::BBox;
use pathcot::images::ImageRef;
use pathcot::log::{parse_session_log, serialize_session_log};
use pathcot::review::{DecisionRequest, Rationale, ReviewSession, TaskSpec, Verdict};
use pathcot::segmenter::{run_pipeline, ActionKind, EventSpan, SegmenterConfig, VlmAction};

fn image(p: &str) -> ImageRef {
    ImageRef { path: p.into(), width: 1024, height: 1024, content_hash: p.into() }
}

#[test]
fn session_to_conversation() {
    let log = parse_session_log(common::GOLDEN_SESSION).unwrap();
    let actions = run_pipeline(&log, &SegmenterConfig::default()).unwrap();
    let drafts: Vec<Rationale> = actions
        .iter()
        .map(|a| Rationale::draft("Nodes in fat. One is enlarged.", "Irregular dark area.", &format!("Seen at {}x. Glands present.", a.magnification_bin)))
        .collect();
    let tasks = actions
        .iter()
        .zip(&drafts)
        .map(|(a, d)| TaskSpec {
            case_id: log.slide.slide_id.clone(),
            thumbnail: image("thumb"),
            roi_box: a.bbox,
            roi_crop: image("roi"),
            cyto_crop: None,
            draft: d.clone(),
        })
        .collect();
    let mut review = ReviewSession::new("golden", "r1", tasks);
    let t0 = review.next_task(0).unwrap();
    review
        .submit_decision(&DecisionRequest { task_id: t0.task_id, verdict: Verdict::Accepted, edited_sentences: vec![], deleted_indices: vec![1] }, 9_000)
        .unwrap();
    let t1 = review.next_task(9_000).unwrap();
    review
        .submit_decision(&DecisionRequest { task_id: t1.task_id, verdict: Verdict::Accepted, edited_sentences: vec![], deleted_indices: vec![] }, 20_000)
        .unwrap();

    let rationales: Vec<_> = drafts.into_iter().enumerate().collect();
    let decisions: Vec<_> = review.decisions().map(|d| (d.roi_index, d.decision.clone())).collect();
    let rounds = assemble_rounds(&log.session_id, &log.pathologist_id, &actions, &rationales, &decisions).unwrap();
    assert_eq!(rounds.training.len(), 2);
    assert_eq!(rounds.training[0].decision.verdict, Verdict::Edited);
    assert_eq!(rounds.training[0].rationale.thumbnail_impression, "Nodes in fat. ");

    let doc = emit_conversation(&log.session_id, &rounds.training, &log.slide, CRC_LN_TASK, None);
    let conv: Conversation = serde_json::from_str(&doc).unwrap();
    let commands: Vec<(f64, Command)> = conv
        .turns
        .iter()
        .filter_map(|t| match t {
            ConversationTurn::User { command, .. } => parse_command_token(command),
            _ => None,
        })
        .collect();
    assert_eq!(commands, [(10.0, Command::Inspect), (40.0, Command::Peek)]);
    assert!(doc.contains("crops/G1/29488_13488_1024_1024.png"));
}

#[test]
fn log_round_trip_keeps_pipeline_output() {
    let log = parse_session_log(common::GOLDEN_SESSION).unwrap();
    let again = parse_session_log(&serialize_session_log(&log)).unwrap();
    assert_eq!(again, log);
    let cfg = SegmenterConfig::default();
    let a = serde_json::to_string(&run_pipeline(&log, &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_pipeline(&again, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_scale_counts() {
    // 921 sessions whose sizes sum to 5222: 617 sessions of 6 rounds and 304 of 5.
    let round = |session: usize, k: usize| CotRound {
        round_id: format!("s{session}:{k}"),
        session_id: format!("s{session}"),
        pathologist_id: format!("p{}", session % 2),
        action_id: k,
        action: VlmAction {
            kind: if k.is_multiple_of(3) { ActionKind::Peek } else { ActionKind::StayInspect },
            bbox: BBox::new(0.0, 0.0, 1024.0, 1024.0),
            magnification_bin: 10.0,
            t_start_ms: k as u64,
            t_end_ms: k as u64,
            source_event_range: EventSpan { start: 0, end: 1 },
        },
        rationale: Rationale::draft("one two", "three", "four five six"),
        decision: pathcot::review::ReviewDecision {
            verdict: Verdict::Accepted,
            deleted_sentence_indices: vec![],
            edited_sentences: vec![],
            edit_durations_ms: 0,
            reviewer_id: "r".into(),
        },
        order_index: k,
        tags: None,
    };
    let rounds: Vec<CotRound> = (0..921).flat_map(|s| (0..if s < 617 { 6 } else { 5 }).map(move |k| round(s, k))).collect();
    let stats = dataset_stats(&rounds);
    assert_eq!((stats.session_count, stats.round_count), (921, 5222));
    assert_eq!(stats.mean_words_peek, Some(6.0));
    assert_eq!(stats.per_pathologist.values().sum::<usize>(), 5222);
}
