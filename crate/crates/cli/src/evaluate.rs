use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use pathcot::agent::CaseResult;
use pathcot::geometry::BBox;
use pathcot::metrics::{
    bootstrap_ci, classification_metrics, match_hits, paired_bootstrap_test, timing_summary,
    BootstrapCi, ClassificationMetrics, ConfusionCounts, PairedTest, TimingRecord, DEFAULT_HIT_IOU,
};
use pathcot::review::RecordedDecision;
use pathcot::segmenter::VlmAction;
use serde::{Deserialize, Serialize};

use crate::io::{list_files, read_json, read_jsonl, write_json, CmdResult, Failure};

/// Reference for one case: the slide label and the regions the expert
/// looked at, as segmented actions, plain boxes, or both.
#[derive(Debug, Deserialize)]
struct ExpertCase {
    case_id: String,
    positive: bool,
    #[serde(default)]
    actions: Vec<VlmAction>,
    #[serde(default)]
    boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    predicted: bool,
    actual: bool,
    n_pred: u64,
    n_expert: u64,
    hits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricSet {
    All,
    Classification,
    Behavior,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of case results from `diagnose`.
    #[arg(long)]
    cases: PathBuf,
    /// Directory of expert references, one JSON file per case.
    #[arg(long)]
    expert: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    metric: MetricSet,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// IoU above which a predicted region hits an expert region.
    #[arg(long, default_value_t = DEFAULT_HIT_IOU)]
    hit_iou: f64,
    /// Second set of case results, compared with a paired bootstrap test.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ClassificationReport {
    counts: ConfusionCounts,
    metrics: ClassificationMetrics,
    ci: BTreeMap<&'static str, BootstrapCi>,
}

#[derive(Debug, Serialize)]
struct BehaviorReport {
    predicted_regions: u64,
    expert_regions: u64,
    hits: u64,
    efficiency: Option<f64>,
    completeness: Option<f64>,
    ci: BTreeMap<&'static str, BootstrapCi>,
}

#[derive(Debug, Serialize)]
struct Report {
    cases: usize,
    bootstrap: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    behavior: Option<BehaviorReport>,
    /// Current minus baseline, per metric.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    comparison: BTreeMap<&'static str, PairedTest>,
}

type Metric = fn(&[Outcome]) -> Option<f64>;

fn counts(o: &[Outcome]) -> ConfusionCounts {
    ConfusionCounts::from_pairs(o.iter().map(|x| (x.predicted, x.actual)))
}

fn classification(o: &[Outcome]) -> Option<ClassificationMetrics> {
    classification_metrics(&counts(o)).ok()
}

const CLASSIFICATION: [(&str, Metric); 4] = [
    ("accuracy", |o| classification(o).map(|m| m.accuracy)),
    ("precision", |o| classification(o)?.precision),
    ("recall", |o| classification(o)?.recall),
    ("f1", |o| classification(o)?.f1),
];

fn totals(o: &[Outcome]) -> (u64, u64, u64) {
    o.iter().fold((0, 0, 0), |(p, e, h), x| (p + x.n_pred, e + x.n_expert, h + x.hits))
}

/// Pooled over cases: total hits over total predicted (or expert) regions.
const BEHAVIOR: [(&str, Metric); 2] = [
    ("efficiency", |o| {
        let (p, _, h) = totals(o);
        (p > 0).then(|| h as f64 / p as f64)
    }),
    ("completeness", |o| {
        let (_, e, h) = totals(o);
        (e > 0).then(|| h as f64 / e as f64)
    }),
];

fn load_cases(dir: &Path) -> CmdResult<BTreeMap<String, CaseResult>> {
    let mut out = BTreeMap::new();
    for file in list_files(dir, "json")? {
        let case: CaseResult = read_json(&file)?;
        if out.insert(case.case_id.clone(), case).is_some() {
            return Err(Failure::schema(format!("{}: duplicate case id", file.display())));
        }
    }
    Ok(out)
}

fn outcomes(cases: &BTreeMap<String, CaseResult>, expert: &BTreeMap<String, ExpertCase>, iou: f64) -> CmdResult<Vec<Outcome>> {
    cases
        .values()
        .map(|case| {
            let reference = expert
                .get(&case.case_id)
                .ok_or_else(|| Failure::schema(format!("no expert reference for case `{}`", case.case_id)))?;
            let predicted: Vec<BBox> = case.roi_analyses.iter().map(|r| r.bbox).collect();
            let mut expert_boxes: Vec<BBox> = reference.actions.iter().map(|a| a.bbox).collect();
            expert_boxes.extend(&reference.boxes);
            let matching = match_hits(&predicted, &expert_boxes, iou);
            Ok(Outcome {
                predicted: case.diagnostic.lymph_node_positive,
                actual: reference.positive,
                n_pred: predicted.len() as u64,
                n_expert: expert_boxes.len() as u64,
                hits: matching.hits.len() as u64,
            })
        })
        .collect()
}

fn intervals(o: &[Outcome], metrics: &[(&'static str, Metric)], args: &EvaluateArgs) -> BTreeMap<&'static str, BootstrapCi> {
    metrics
        .iter()
        .filter_map(|&(name, f)| match bootstrap_ci(o, f, args.bootstrap, args.seed, (2.5, 97.5)) {
            Ok(ci) => Some((name, ci)),
            Err(e) => {
                tracing::warn!(metric = name, error = %e, "no confidence interval");
                None
            }
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let cases = load_cases(&args.cases)?;
    if cases.is_empty() {
        return Err(Failure::schema(format!("{}: no case results", args.cases.display())));
    }
    let mut expert = BTreeMap::new();
    for file in list_files(&args.expert, "json")? {
        let e: ExpertCase = read_json(&file)?;
        expert.insert(e.case_id.clone(), e);
    }
    let current = outcomes(&cases, &expert, args.hit_iou)?;

    let classification = matches!(args.metric, MetricSet::All | MetricSet::Classification).then(|| {
        let c = counts(&current);
        ClassificationReport {
            counts: c,
            metrics: classification_metrics(&c).expect("at least one case"),
            ci: intervals(&current, &CLASSIFICATION, &args),
        }
    });
    let behavior = matches!(args.metric, MetricSet::All | MetricSet::Behavior).then(|| {
        let (p, e, h) = totals(&current);
        BehaviorReport {
            predicted_regions: p,
            expert_regions: e,
            hits: h,
            efficiency: BEHAVIOR[0].1(&current),
            completeness: BEHAVIOR[1].1(&current),
            ci: intervals(&current, &BEHAVIOR, &args),
        }
    });

    let mut comparison = BTreeMap::new();
    if let Some(dir) = &args.baseline {
        let base = load_cases(dir)?;
        let ids: BTreeSet<&String> = cases.keys().collect();
        if base.keys().collect::<BTreeSet<_>>() != ids {
            return Err(Failure::schema("baseline and current results must cover the same cases"));
        }
        let baseline = outcomes(&base, &expert, args.hit_iou)?;
        let mut selected: Vec<(&'static str, Metric)> = Vec::new();
        if classification.is_some() {
            selected.extend(CLASSIFICATION);
        }
        if behavior.is_some() {
            selected.extend(BEHAVIOR);
        }
        for (name, f) in selected {
            match paired_bootstrap_test(&current, &baseline, f, args.bootstrap, args.seed) {
                Ok(t) => {
                    comparison.insert(name, t);
                }
                Err(e) => tracing::warn!(metric = name, error = %e, "no paired test"),
            }
        }
    }

    let report = Report { cases: current.len(), bootstrap: args.bootstrap, seed: args.seed, classification, behavior, comparison };
    write_json(&args.out, &report)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TimingLine {
    Record(TimingRecord),
    Decision(Box<RecordedDecision>),
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// JSONL files of timing records or review exports; may repeat.
    #[arg(long, required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn timing(args: TimingArgs) -> CmdResult {
    let mut records = Vec::new();
    for path in &args.records {
        for line in read_jsonl::<TimingLine>(path)? {
            match line {
                TimingLine::Record(r) => records.push(r),
                TimingLine::Decision(d) => records.extend(d.timing),
            }
        }
    }
    write_json(&args.out, &timing_summary(&records))
}
