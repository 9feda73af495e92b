//! The three-stage diagnostic loop: thumbnail overview, proposed regions
//! analyzed at high power, and a final summary with structured diagnosis.
//!
//! Region proposals come from a [`RegionProposer`] chosen by task key; the
//! detector behind it lives elsewhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::gateway::{
    account_call, build_prompt, parse_diagnostic_info, parse_tagged, send_with_retry, CallRecord, ChatTurn,
    DiagnosticInfo, ModelEndpoint, Pricing, PromptContext, PromptError, PromptStage, RetryPolicy, CRC_LN_TASK,
};
use crate::geometry::BBox;
use crate::images::{CropRequest, ImageProvider, ImageRef, DEFAULT_TARGET_PX};
use crate::log::SlideMeta;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("random ordering needs a seed")]
    MissingSeed,
    #[error("proposal {index} is invalid: {reason}")]
    InvalidProposal { index: usize, reason: String },
    #[error("no proposer registered for task `{0}`")]
    UnknownTask(String),
    #[error("proposer failed: {0}")]
    Proposer(String),
    #[error("{stage:?} call failed: {message}")]
    EndpointFailure { stage: PromptStage, message: String },
    #[error("could not parse the {0:?} answer")]
    ParseFailure(PromptStage),
    #[error("image unavailable: {0}")]
    Image(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Forward,
    Reverse,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderPolicy {
    pub policy: Order,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl OrderPolicy {
    pub const FORWARD: OrderPolicy = OrderPolicy { policy: Order::Forward, seed: None };
    pub const REVERSE: OrderPolicy = OrderPolicy { policy: Order::Reverse, seed: None };

    pub fn random(seed: u64) -> Self {
        Self { policy: Order::Random, seed: Some(seed) }
    }
}

/// Reorders regions for presentation. Random is a Fisher-Yates shuffle
/// driven by ChaCha8 seeded with the policy seed.
pub fn permute_rois<T>(mut rois: Vec<T>, order: &OrderPolicy) -> Result<Vec<T>, AgentError> {
    match order.policy {
        Order::Forward => {}
        Order::Reverse => rois.reverse(),
        Order::Random => {
            let seed = order.seed.ok_or(AgentError::MissingSeed)?;
            rois.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    Ok(rois)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

pub trait RegionProposer: Send + Sync {
    fn propose(&self, slide: &SlideMeta, thumbnail: &ImageRef) -> Result<Vec<RegionProposal>, AgentError>;
}

/// Fixed proposals, whatever the slide.
#[derive(Debug, Clone, Default)]
pub struct StaticProposer(pub Vec<RegionProposal>);

impl RegionProposer for StaticProposer {
    fn propose(&self, _: &SlideMeta, _: &ImageRef) -> Result<Vec<RegionProposal>, AgentError> {
        Ok(self.0.clone())
    }
}

/// Pre-computed detector output: a JSON list of proposals, or an object
/// mapping slide ids to lists.
#[derive(Debug, Clone, Default)]
pub struct FileProposer {
    by_slide: BTreeMap<String, Vec<RegionProposal>>,
    fallback: Option<Vec<RegionProposal>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProposalFile {
    List(Vec<RegionProposal>),
    BySlide(BTreeMap<String, Vec<RegionProposal>>),
}

impl FileProposer {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let parsed: ProposalFile = serde_json::from_str(text).map_err(|e| AgentError::Proposer(e.to_string()))?;
        Ok(match parsed {
            ProposalFile::List(list) => Self { by_slide: BTreeMap::new(), fallback: Some(list) },
            ProposalFile::BySlide(map) => Self { by_slide: map, fallback: None },
        })
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::Proposer(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl RegionProposer for FileProposer {
    fn propose(&self, slide: &SlideMeta, _: &ImageRef) -> Result<Vec<RegionProposal>, AgentError> {
        Ok(self
            .by_slide
            .get(&slide.slide_id)
            .or(self.fallback.as_ref())
            .cloned()
            .unwrap_or_default())
    }
}

/// Proposers keyed by task; picking one is the whole routing step.
#[derive(Default)]
pub struct ProposerRegistry {
    proposers: BTreeMap<String, Box<dyn RegionProposer>>,
}

impl ProposerRegistry {
    pub fn register(&mut self, task_key: impl Into<String>, proposer: Box<dyn RegionProposer>) {
        self.proposers.insert(task_key.into(), proposer);
    }

    pub fn select(&self, task_key: &str) -> Result<&dyn RegionProposer, AgentError> {
        self.proposers
            .get(task_key)
            .map(|p| p.as_ref())
            .ok_or_else(|| AgentError::UnknownTask(task_key.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub task: String,
    pub order: OrderPolicy,
    pub cap: Option<usize>,
    /// Maximum ROI calls in flight.
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub pricing: Pricing,
    /// Level-0 side of the centered native-power crop sent with each ROI.
    pub cyto_crop_px: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            task: CRC_LN_TASK.to_string(),
            order: OrderPolicy::FORWARD,
            cap: None,
            concurrency: 4,
            retry: RetryPolicy::default(),
            pricing: Pricing::default(),
            cyto_crop_px: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiAnalysis {
    /// One-based number used in the prompts and in `positive_regions`.
    pub region: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum CaseFlag {
    ProposerEmpty,
    CropUnavailable { region: usize, message: String },
    RoiFailed { region: usize, message: String },
    MissingRecommendations,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub calls: Vec<CallRecord>,
    pub input_tokens: u64,
    pub image_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
}

impl CostSummary {
    fn push(&mut self, record: CallRecord) {
        self.input_tokens += record.input_tokens;
        self.image_tokens += record.image_tokens;
        self.output_tokens += record.output_tokens;
        self.cost_usd += record.cost_usd;
        self.calls.push(record);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub model: String,
    pub order: OrderPolicy,
    pub cap: Option<usize>,
    pub overview_impression: String,
    /// In presentation order.
    pub roi_analyses: Vec<RoiAnalysis>,
    pub planned_rois: usize,
    pub final_impression: String,
    pub recommendations: String,
    pub diagnostic: DiagnosticInfo,
    pub cost: CostSummary,
    pub latency_ms: u64,
    pub flags: Vec<CaseFlag>,
}

impl CaseResult {
    /// Boxes the model called positive.
    pub fn positive_boxes(&self) -> Vec<BBox> {
        self.diagnostic
            .positive_regions
            .iter()
            .filter_map(|&n| self.roi_analyses.iter().find(|r| r.region == n as usize))
            .map(|r| r.bbox)
            .collect()
    }
}

/// Everything `run_case` talks to.
pub struct CaseEnv<'a> {
    pub proposer: &'a dyn RegionProposer,
    pub endpoint: &'a dyn ModelEndpoint,
    pub images: &'a dyn ImageProvider,
    pub clock: &'a dyn Clock,
}

fn check_proposals(slide: &SlideMeta, proposals: &[RegionProposal]) -> Result<(), AgentError> {
    for (index, p) in proposals.iter().enumerate() {
        let reason = if !(0.0..=1.0).contains(&p.score) {
            format!("score {} outside [0, 1]", p.score)
        } else if p.bbox.validated().is_err() || !p.bbox.within(slide.width(), slide.height()) {
            format!("box {:?} outside the slide", p.bbox)
        } else {
            continue;
        };
        return Err(AgentError::InvalidProposal { index, reason });
    }
    Ok(())
}

/// Keeps the `cap` best-scoring proposals in their original order.
fn select_top(proposals: Vec<RegionProposal>, cap: Option<usize>) -> Vec<RegionProposal> {
    let Some(cap) = cap.filter(|c| *c < proposals.len()) else {
        return proposals;
    };
    let mut ranked: Vec<usize> = (0..proposals.len()).collect();
    ranked.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut keep = ranked[..cap].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| proposals[i]).collect()
}

struct Caller<'a> {
    endpoint: &'a dyn ModelEndpoint,
    retry: RetryPolicy,
    pricing: Pricing,
}

impl Caller<'_> {
    fn call(
        &self,
        stage: PromptStage,
        roi_index: Option<usize>,
        turns: &[ChatTurn],
    ) -> Result<(String, CallRecord), AgentError> {
        let (completion, attempts) = send_with_retry(self.endpoint, turns, &self.retry)
            .map_err(|e| AgentError::EndpointFailure { stage, message: e.to_string() })?;
        let record = account_call(stage, roi_index, attempts, turns, completion.usage, &self.pricing);
        Ok((completion.text, record))
    }
}

struct RoiJob {
    region: usize,
    proposal: RegionProposal,
    turn: ChatTurn,
}

/// Runs one case end to end.
pub fn run_case(slide: &SlideMeta, env: &CaseEnv<'_>, cfg: &AgentConfig) -> Result<CaseResult, AgentError> {
    let started = env.clock.now_ms();
    let caller = Caller { endpoint: env.endpoint, retry: cfg.retry, pricing: cfg.pricing };
    let mut cost = CostSummary::default();
    let mut flags = Vec::new();

    let thumbnail = env.images.get_thumbnail(&slide.slide_id).map_err(|e| AgentError::Image(e.to_string()))?;
    let base_ctx = PromptContext { task: Some(cfg.task.clone()), ..Default::default() };

    let mut history = build_prompt(
        PromptStage::Overview,
        &PromptContext { thumbnail: Some(thumbnail.clone()), ..base_ctx.clone() },
    )?;
    let (overview_text, record) = caller.call(PromptStage::Overview, None, &history)?;
    cost.push(record);
    let overview_impression =
        parse_tagged(&overview_text, "impression").map_err(|_| AgentError::ParseFailure(PromptStage::Overview))?;
    history.push(ChatTurn::model(overview_text));

    let proposals = env.proposer.propose(slide, &thumbnail)?;
    check_proposals(slide, &proposals)?;
    if proposals.is_empty() {
        flags.push(CaseFlag::ProposerEmpty);
    }
    let rois = permute_rois(select_top(proposals, cfg.cap), &cfg.order)?;
    let planned_rois = rois.len();

    let mut jobs = Vec::new();
    for (i, proposal) in rois.into_iter().enumerate() {
        let region = i + 1;
        let (cx, cy) = proposal.bbox.center();
        let cyto_box = BBox::centered_square(cx, cy, cfg.cyto_crop_px as f64).clamp_translate(slide.width(), slide.height());
        let crops = env
            .images
            .get_crop(&CropRequest { target_px: DEFAULT_TARGET_PX, ..CropRequest::new(&slide.slide_id, proposal.bbox) })
            .and_then(|roi| Ok((roi, env.images.get_crop(&CropRequest::new(&slide.slide_id, cyto_box))?)));
        let (roi_crop, cyto_crop) = match crops {
            Ok(pair) => pair,
            Err(e) => {
                flags.push(CaseFlag::CropUnavailable { region, message: e.to_string() });
                continue;
            }
        };
        let ctx = PromptContext {
            roi_index: Some(i),
            roi_crop: Some(roi_crop),
            cyto_crop: Some(cyto_crop),
            ..base_ctx.clone()
        };
        let turn = build_prompt(PromptStage::RoiAnalysis, &ctx)?.remove(0);
        jobs.push(RoiJob { region, proposal, turn });
    }

    let mut outcomes = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cfg.concurrency.max(1)) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|job| {
                    let mut turns = history.clone();
                    turns.push(job.turn.clone());
                    let caller = &caller;
                    s.spawn(move || {
                        let out = caller.call(PromptStage::RoiAnalysis, Some(job.region - 1), &turns);
                        (turns.pop().expect("roi turn"), out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ROI worker panicked")).collect()
        });
        outcomes.extend(results);
    }

    let mut roi_analyses = Vec::new();
    for (job, (turn, outcome)) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((text, record)) => {
                cost.push(record);
                history.push(turn);
                history.push(ChatTurn::model(text.clone()));
                roi_analyses.push(RoiAnalysis {
                    region: job.region,
                    bbox: job.proposal.bbox,
                    score: job.proposal.score,
                    text: text.trim().to_string(),
                });
            }
            Err(e) => flags.push(CaseFlag::RoiFailed { region: job.region, message: e.to_string() }),
        }
    }

    let summary_ctx = PromptContext { region_counts: Some((roi_analyses.len(), planned_rois)), ..base_ctx };
    history.extend(build_prompt(PromptStage::FinalSummary, &summary_ctx)?);
    let (final_text, record) = caller.call(PromptStage::FinalSummary, None, &history)?;
    cost.push(record);
    let parse_failure = |_| AgentError::ParseFailure(PromptStage::FinalSummary);
    let final_impression = parse_tagged(&final_text, "final_impression").map_err(parse_failure)?;
    let diagnostic = parse_diagnostic_info(&final_text).map_err(parse_failure)?;
    let recommendations = parse_tagged(&final_text, "recommendations").unwrap_or_else(|_| {
        flags.push(CaseFlag::MissingRecommendations);
        String::new()
    });

    Ok(CaseResult {
        case_id: slide.slide_id.clone(),
        model: env.endpoint.model_name().to_string(),
        order: cfg.order,
        cap: cfg.cap,
        overview_impression,
        roi_analyses,
        planned_rois,
        final_impression,
        recommendations,
        diagnostic,
        cost,
        latency_ms: env.clock.now_ms().saturating_sub(started),
        flags,
    })
}

/// One row of an order/cap ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub order: OrderPolicy,
    pub cap: Option<usize>,
    pub result: Result<CaseResult, String>,
}

/// Runs the same case under each `(order, cap)` variant.
pub fn run_ablation(
    slide: &SlideMeta,
    env: &CaseEnv<'_>,
    base: &AgentConfig,
    variants: &[(OrderPolicy, Option<usize>)],
) -> Vec<AblationRun> {
    variants
        .iter()
        .map(|&(order, cap)| {
            let cfg = AgentConfig { order, cap, ..base.clone() };
            AblationRun { order, cap, result: run_case(slide, env, &cfg).map_err(|e| e.to_string()) }
        })
        .collect()
}
