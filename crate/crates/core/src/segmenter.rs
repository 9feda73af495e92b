//! Behavior analysis: turns a viewport stream into discrete viewing actions.
//!
//! The pipeline has five stages, each exposed on its own so that callers and
//! tests can inspect intermediate results:
//!
//! 1. [`segment_actions`] finds dwells (stay inspects), sustained pans (pan
//!    inspects) and arrivals at native power (peeks).
//! 2. [`filter_big_bboxes`] drops low-magnification overview actions.
//! 3. [`merge_similar`] fuses heavily overlapping inspects.
//! 4. [`filter_mostly_contained`] drops broad actions that contain a more
//!    specific one.
//! 5. [`standardize_action_bboxes`] snaps every box to a standard objective.
//!
//! The field of view at effective power `m` is modeled as a square of side
//! `slide.height_px / m` centered on the logged viewport center, the same
//! convention that makes a 5x standard box `height / 5` pixels wide.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{containment_fraction, iou, union_box, BBox};
use crate::log::{SessionLog, SlideMeta, ViewportEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("session has no events")]
    EmptySession,
    #[error("invalid segmenter config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub stay_dwell_s: f64,
    pub pan_duration_s: f64,
    pub peek_min_dwell_s: f64,
    /// Actions wider than this fraction of the slide height are overviews.
    pub big_box_fraction: f64,
    pub merge_iou_threshold: f64,
    pub containment_threshold: f64,
    /// Objective powers an inspect may be snapped to.
    pub standard_bins: Vec<f64>,
    /// Side of the native-power crop captured by a peek, in level-0 pixels.
    pub peek_crop_px: u64,
    /// Two samples show the same viewport when their centers are closer than
    /// this fraction of the field-of-view width and the power is unchanged.
    pub same_view_tolerance: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            stay_dwell_s: 1.0,
            pan_duration_s: 2.0,
            peek_min_dwell_s: 0.2,
            big_box_fraction: 0.4,
            merge_iou_threshold: 0.8,
            containment_threshold: 0.9,
            standard_bins: vec![5.0, 10.0],
            peek_crop_px: 1024,
            same_view_tolerance: 0.01,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let positive = [
            ("stay_dwell_s", self.stay_dwell_s),
            ("pan_duration_s", self.pan_duration_s),
            ("peek_min_dwell_s", self.peek_min_dwell_s),
            ("big_box_fraction", self.big_box_fraction),
            ("same_view_tolerance", self.same_view_tolerance),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SegmentError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        for (name, value) in [
            ("merge_iou_threshold", self.merge_iou_threshold),
            ("containment_threshold", self.containment_threshold),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(SegmentError::InvalidConfig(format!("{name} must be in (0, 1]")));
            }
        }
        if self.standard_bins.is_empty() || self.standard_bins.iter().any(|b| !(*b > 0.0)) {
            return Err(SegmentError::InvalidConfig(
                "standard_bins must be non-empty and positive".into(),
            ));
        }
        if self.peek_crop_px == 0 {
            return Err(SegmentError::InvalidConfig("peek_crop_px must be > 0".into()));
        }
        Ok(())
    }

    fn ms(seconds: f64) -> f64 {
        seconds * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    StayInspect,
    PanInspect,
    Peek,
}

impl ActionKind {
    pub fn is_peek(self) -> bool {
        self == ActionKind::Peek
    }

    pub fn command(self) -> &'static str {
        match self {
            ActionKind::StayInspect | ActionKind::PanInspect => "inspect",
            ActionKind::Peek => "peek",
        }
    }
}

/// Half-open range of event indices an action was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start: usize,
    pub end: usize,
}

impl EventSpan {
    fn hull(self, other: EventSpan) -> EventSpan {
        EventSpan {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmAction {
    pub kind: ActionKind,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Objective power of the action; a standard bin (or native power for
    /// peeks) once the pipeline has run.
    pub magnification_bin: f64,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    pub source_event_range: EventSpan,
}

fn same_power(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn at_native(magnification: f64, slide: &SlideMeta) -> bool {
    magnification >= slide.native_magnification * (1.0 - 1e-9)
}

fn fov_side(slide: &SlideMeta, magnification: f64) -> f64 {
    slide.height() / magnification
}

/// Field of view of one sample, clipped to the slide.
pub fn field_of_view(slide: &SlideMeta, event: &ViewportEvent) -> BBox {
    let raw = BBox::centered_square(
        event.center_x,
        event.center_y,
        fov_side(slide, event.magnification),
    );
    raw.clip(slide.width(), slide.height())
        .unwrap_or_else(|| raw.clamp_translate(slide.width(), slide.height()))
}

fn same_view(anchor: &ViewportEvent, other: &ViewportEvent, slide: &SlideMeta, tol: f64) -> bool {
    if !same_power(anchor.magnification, other.magnification) {
        return false;
    }
    let dist = (anchor.center_x - other.center_x).hypot(anchor.center_y - other.center_y);
    dist < tol * fov_side(slide, anchor.magnification)
}

fn is_pan_step(a: &ViewportEvent, b: &ViewportEvent, slide: &SlideMeta, tol: f64) -> bool {
    same_power(a.magnification, b.magnification) && !same_view(a, b, slide, tol)
}

fn peek_box(cx: f64, cy: f64, slide: &SlideMeta, cfg: &SegmenterConfig) -> BBox {
    BBox::centered_square(cx, cy, cfg.peek_crop_px as f64).clamp_translate(slide.width(), slide.height())
}

fn by_start(a: &VlmAction, b: &VlmAction) -> Ordering {
    a.t_start_ms.cmp(&b.t_start_ms)
}

/// Stage 1: initial segmentation into stay inspects, pan inspects and peeks.
pub fn segment_actions(log: &SessionLog, cfg: &SegmenterConfig) -> Result<Vec<VlmAction>, SegmentError> {
    let events = &log.events;
    if events.is_empty() {
        return Err(SegmentError::EmptySession);
    }
    let slide = &log.slide;
    let tol = cfg.same_view_tolerance;
    let mut actions = Vec::new();

    // Dwells: maximal runs sharing the viewport of their first sample. A run
    // lasts until the next differing sample (or the final sample).
    let mut i = 0;
    while i < events.len() {
        let anchor = &events[i];
        let mut j = i;
        while j + 1 < events.len() && same_view(anchor, &events[j + 1], slide, tol) {
            j += 1;
        }
        let end_ms = events.get(j + 1).map_or(events[j].t_ms, |e| e.t_ms);
        let dwell = (end_ms - anchor.t_ms) as f64;
        let span = EventSpan { start: i, end: j + 1 };
        if at_native(anchor.magnification, slide) {
            if dwell >= SegmenterConfig::ms(cfg.peek_min_dwell_s) {
                actions.push(VlmAction {
                    kind: ActionKind::Peek,
                    bbox: peek_box(anchor.center_x, anchor.center_y, slide, cfg),
                    magnification_bin: slide.native_magnification,
                    t_start_ms: anchor.t_ms,
                    t_end_ms: end_ms,
                    source_event_range: span,
                });
            }
        } else if dwell >= SegmenterConfig::ms(cfg.stay_dwell_s) {
            actions.push(VlmAction {
                kind: ActionKind::StayInspect,
                bbox: field_of_view(slide, anchor),
                magnification_bin: anchor.magnification,
                t_start_ms: anchor.t_ms,
                t_end_ms: end_ms,
                source_event_range: span,
            });
        }
        i = j + 1;
    }

    // Pans: maximal runs of consecutive moves at constant power.
    let mut start = 0;
    while start + 1 < events.len() {
        if !is_pan_step(&events[start], &events[start + 1], slide, tol) {
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end + 1 < events.len() && is_pan_step(&events[end], &events[end + 1], slide, tol) {
            end += 1;
        }
        let duration = (events[end].t_ms - events[start].t_ms) as f64;
        if duration >= SegmenterConfig::ms(cfg.pan_duration_s) {
            let bbox = events[start..=end]
                .iter()
                .map(|e| field_of_view(slide, e))
                .reduce(|a, b| union_box(&a, &b))
                .expect("run has at least two events");
            actions.push(VlmAction {
                kind: ActionKind::PanInspect,
                bbox,
                magnification_bin: events[start].magnification,
                t_start_ms: events[start].t_ms,
                t_end_ms: events[end].t_ms,
                source_event_range: EventSpan { start, end: end + 1 },
            });
        }
        start = end;
    }

    actions.sort_by(|a, b| {
        by_start(a, b)
            .then(a.source_event_range.start.cmp(&b.source_event_range.start))
            .then(a.kind.cmp(&b.kind))
    });
    Ok(actions)
}

/// Stage 2: drops actions whose box width exceeds `big_box_fraction` of the
/// slide *height*. Peeks are always kept.
pub fn filter_big_bboxes(actions: Vec<VlmAction>, slide: &SlideMeta, cfg: &SegmenterConfig) -> Vec<VlmAction> {
    let limit = cfg.big_box_fraction * slide.height();
    actions
        .into_iter()
        .filter(|a| a.kind.is_peek() || a.bbox.w <= limit)
        .collect()
}

fn merge_two(a: &VlmAction, b: &VlmAction) -> VlmAction {
    let kind = if a.kind == ActionKind::StayInspect || b.kind == ActionKind::StayInspect {
        ActionKind::StayInspect
    } else {
        ActionKind::PanInspect
    };
    VlmAction {
        kind,
        bbox: union_box(&a.bbox, &b.bbox),
        magnification_bin: a.magnification_bin.min(b.magnification_bin),
        t_start_ms: a.t_start_ms.min(b.t_start_ms),
        t_end_ms: a.t_end_ms.max(b.t_end_ms),
        source_event_range: a.source_event_range.hull(b.source_event_range),
    }
}

/// Stage 3: repeatedly fuses the first inspect pair (ascending start time,
/// then index) whose IoU exceeds the threshold, until none is left. Peeks are
/// never merged.
pub fn merge_similar(mut actions: Vec<VlmAction>, cfg: &SegmenterConfig) -> Vec<VlmAction> {
    actions.sort_by(by_start);
    loop {
        let hit = (0..actions.len())
            .flat_map(|i| (i + 1..actions.len()).map(move |j| (i, j)))
            .find(|&(i, j)| {
                let (a, b) = (&actions[i], &actions[j]);
                !a.kind.is_peek()
                    && !b.kind.is_peek()
                    && iou(&a.bbox, &b.bbox) > cfg.merge_iou_threshold
            });
        let Some((i, j)) = hit else { break };
        let merged = merge_two(&actions[i], &actions[j]);
        actions.remove(j);
        actions[i] = merged;
        actions.sort_by(by_start);
    }
    actions
}

pub(crate) fn areas_differ(a: &BBox, b: &BBox) -> bool {
    (a.area() - b.area()).abs() > 1e-9 * a.area().max(b.area())
}

/// Which member of a pair stage 4 removes, if any.
fn redundant_member(a: &VlmAction, b: &VlmAction, threshold: f64) -> Option<usize> {
    if containment_fraction(&a.bbox, &b.bbox) <= threshold {
        return None;
    }
    match (a.kind.is_peek(), b.kind.is_peek()) {
        (true, false) => Some(1),
        (false, true) => Some(0),
        _ if !areas_differ(&a.bbox, &b.bbox) => Some(1),
        _ if a.bbox.area() > b.bbox.area() => Some(0),
        _ => Some(1),
    }
}

/// Stage 4: when one box is mostly inside another, the larger (less
/// specific) action goes. A peek always counts as the smaller member; of two
/// equal boxes the later one is a repeat look and goes.
pub fn filter_mostly_contained(mut actions: Vec<VlmAction>, cfg: &SegmenterConfig) -> Vec<VlmAction> {
    actions.sort_by(by_start);
    loop {
        let victim = (0..actions.len())
            .flat_map(|i| (i + 1..actions.len()).map(move |j| (i, j)))
            .find_map(|(i, j)| {
                redundant_member(&actions[i], &actions[j], cfg.containment_threshold)
                    .map(|which| if which == 0 { i } else { j })
            });
        match victim {
            Some(idx) => {
                actions.remove(idx);
            }
            None => break,
        }
    }
    actions
}

/// Standard bin whose nominal side (`height / bin`) is closest to `side`.
/// Ties go to the higher power.
pub fn nearest_bin(side: f64, slide_height: f64, bins: &[f64]) -> f64 {
    let mut best = bins[0];
    let mut best_gap = f64::INFINITY;
    for &bin in bins {
        let gap = (slide_height / bin - side).abs();
        if gap < best_gap || (gap == best_gap && bin > best) {
            best = bin;
            best_gap = gap;
        }
    }
    best
}

/// Stage 5: snaps inspects to the nearest standard objective and makes every
/// box a standard square inside the slide.
pub fn standardize_action_bboxes(
    actions: Vec<VlmAction>,
    slide: &SlideMeta,
    cfg: &SegmenterConfig,
) -> Vec<VlmAction> {
    actions
        .into_iter()
        .map(|mut a| {
            let (cx, cy) = a.bbox.center();
            if a.kind.is_peek() {
                a.bbox = peek_box(cx, cy, slide, cfg);
                a.magnification_bin = slide.native_magnification;
            } else {
                let bin = nearest_bin(a.bbox.w.max(a.bbox.h), slide.height(), &cfg.standard_bins);
                a.bbox = BBox::centered_square(cx, cy, slide.height() / bin)
                    .clamp_translate(slide.width(), slide.height());
                a.magnification_bin = bin;
            }
            a
        })
        .collect()
}

/// All five stages in order.
pub fn run_pipeline(log: &SessionLog, cfg: &SegmenterConfig) -> Result<Vec<VlmAction>, SegmentError> {
    cfg.validate()?;
    let actions = segment_actions(log, cfg)?;
    let actions = filter_big_bboxes(actions, &log.slide, cfg);
    let actions = merge_similar(actions, cfg);
    let actions = filter_mostly_contained(actions, cfg);
    Ok(standardize_action_bboxes(actions, &log.slide, cfg))
}
