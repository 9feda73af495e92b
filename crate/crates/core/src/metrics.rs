//! Evaluation mathematics: classification and behavior-matching scores,
//! bootstrap intervals, the paired bootstrap test, BCE and timing analysis.
//!
//! Ratios with a zero denominator are `None`, never 0.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::geometry::{iou, BBox};

pub const BCE_EPS: f64 = 1e-12;
pub const DEFAULT_HIT_IOU: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric is undefined on the full sample and on every resample")]
    UndefinedMetric,
    #[error("percentile levels must satisfy 0 <= lo <= hi <= 100, got ({0}, {1})")]
    InvalidLevels(f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Absent when precision or recall is, or when both are 0.
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ClassificationMetrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitMatching {
    /// `(predicted index, expert index)`, in matching order.
    pub hits: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_expert: Vec<usize>,
}

/// Boxes count as the same region when IoU exceeds the threshold or one
/// contains the other (different magnification preferences).
pub fn is_hit(a: &BBox, b: &BBox, iou_threshold: f64) -> bool {
    iou(a, b) > iou_threshold || a.contains(b) || b.contains(a)
}

/// Greedy one-to-one matching in descending IoU, ties by `(pred, expert)`.
pub fn match_hits(predicted: &[BBox], expert: &[BBox], iou_threshold: f64) -> HitMatching {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, e) in expert.iter().enumerate() {
            if is_hit(p, e, iou_threshold) {
                candidates.push((iou(p, e), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; predicted.len()];
    let mut expert_used = vec![false; expert.len()];
    let mut hits = Vec::new();
    for (_, i, j) in candidates {
        if !pred_used[i] && !expert_used[j] {
            pred_used[i] = true;
            expert_used[j] = true;
            hits.push((i, j));
        }
    }
    let unused = |used: Vec<bool>| used.iter().enumerate().filter(|(_, u)| !**u).map(|(i, _)| i).collect();
    HitMatching { hits, unmatched_predictions: unused(pred_used), unmatched_expert: unused(expert_used) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScores {
    pub efficiency: Option<f64>,
    pub completeness: Option<f64>,
}

/// Efficiency is hits over predictions, completeness hits over expert regions.
pub fn efficiency_completeness(m: &HitMatching, n_pred: usize, n_expert: usize) -> BehaviorScores {
    let hits = m.hits.len() as u64;
    debug_assert!(hits as usize <= n_pred.min(n_expert) || n_pred == 0 || n_expert == 0);
    BehaviorScores {
        efficiency: ratio(hits, n_pred as u64),
        completeness: ratio(hits, n_expert as u64),
    }
}

/// Percentile with linear interpolation between order statistics at rank
/// `p / 100 * (n - 1)`. `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Indices of bootstrap resample `iteration`: stream `iteration` of a
/// ChaCha8 generator seeded with `seed`, so each resample is independent of
/// scheduling.
fn resample_indices(seed: u64, iteration: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn gather<T: Clone>(items: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| items[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
    /// Resamples on which the metric was defined.
    pub n_valid: usize,
}

/// Percentile bootstrap over cases. Resamples on which `metric` is `None`
/// are skipped.
pub fn bootstrap_ci<T, F>(
    outcomes: &[T],
    metric: F,
    n_iter: usize,
    seed: u64,
    levels: (f64, f64),
) -> Result<BootstrapCi, MetricsError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Option<f64> + Sync,
{
    if outcomes.is_empty() || n_iter == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&levels.0) || !(levels.0..=100.0).contains(&levels.1) {
        return Err(MetricsError::InvalidLevels(levels.0, levels.1));
    }
    let point = metric(outcomes).ok_or(MetricsError::UndefinedMetric)?;
    let mut values: Vec<f64> = (0..n_iter as u64)
        .into_par_iter()
        .filter_map(|i| metric(&gather(outcomes, &resample_indices(seed, i, outcomes.len()))))
        .collect();
    if values.is_empty() {
        return Err(MetricsError::UndefinedMetric);
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: percentile(&values, levels.0),
        hi: percentile(&values, levels.1),
        point,
        n_valid: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// Absent under zero variance.
    pub t_statistic: Option<f64>,
    pub df: usize,
    pub p_value: f64,
    pub n_valid: usize,
}

/// Bootstraps `metric(A) - metric(B)` over shared resamples and runs a
/// two-sided one-sample t-test of the differences against 0. With zero
/// variance, p is 1 when the mean difference is 0 and 0 otherwise.
pub fn paired_bootstrap_test<T, F>(
    a: &[T],
    b: &[T],
    metric: F,
    n_iter: usize,
    seed: u64,
) -> Result<PairedTest, MetricsError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Option<f64> + Sync,
{
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() || n_iter == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let diffs: Vec<f64> = (0..n_iter as u64)
        .into_par_iter()
        .filter_map(|i| {
            let idx = resample_indices(seed, i, a.len());
            Some(metric(&gather(a, &idx))? - metric(&gather(b, &idx))?)
        })
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Err(MetricsError::UndefinedMetric);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let sd = var.sqrt();
    let df = n.saturating_sub(1);
    if sd == 0.0 || df == 0 {
        let p_value = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(PairedTest { mean_diff: mean, sd_diff: sd, t_statistic: None, df, p_value, n_valid: n });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df > 0");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTest { mean_diff: mean, sd_diff: sd, t_statistic: Some(t), df, p_value, n_valid: n })
}

/// Mean binary cross-entropy with probabilities clipped to `[eps, 1 - eps]`.
pub fn bce_loss(labels: &[bool], probs: &[f64]) -> Result<f64, MetricsError> {
    if labels.len() != probs.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), probs.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    Verify,
    Revise,
    ManualTyping,
    ManualDictation,
}

impl TimingMode {
    pub fn is_manual(self) -> bool {
        matches!(self, TimingMode::ManualTyping | TimingMode::ManualDictation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round_id: String,
    pub mode: TimingMode,
    pub t_write_ms: u64,
    /// Navigation time of the source expert; manual modes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_nav_expert_ms: Option<u64>,
}

impl TimingRecord {
    /// Time charged to the round. Manual writing is charged the source
    /// expert's navigation on top, since the workflow modes get navigation
    /// for free from the recorded session.
    pub fn adjusted_ms(&self) -> u64 {
        if self.mode.is_manual() {
            self.t_write_ms + self.t_nav_expert_ms.unwrap_or(0)
        } else {
            self.t_write_ms
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub rounds: usize,
    pub mean_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Manual mean over verify mean.
    pub vs_verify: Option<f64>,
    /// Manual mean over the mean of all verify and revise rounds.
    pub vs_workflow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_mode: BTreeMap<TimingMode, ModeSummary>,
    /// revise / (verify + revise); absent with no workflow rounds.
    pub revision_rate: Option<f64>,
    pub workflow_mean_s: Option<f64>,
    pub speedups: BTreeMap<TimingMode, Speedup>,
}

fn mean_s<'a>(records: impl Iterator<Item = &'a TimingRecord>) -> Option<(usize, f64)> {
    let (n, total) = records.fold((0usize, 0u64), |(n, t), r| (n + 1, t + r.adjusted_ms()));
    (n > 0).then(|| (n, total as f64 / n as f64 / 1000.0))
}

pub fn timing_summary(records: &[TimingRecord]) -> TimingReport {
    let mut per_mode = BTreeMap::new();
    for mode in [TimingMode::Verify, TimingMode::Revise, TimingMode::ManualTyping, TimingMode::ManualDictation] {
        if let Some((rounds, mean)) = mean_s(records.iter().filter(|r| r.mode == mode)) {
            per_mode.insert(mode, ModeSummary { rounds, mean_s: mean });
        }
    }
    let count = |m| per_mode.get(&m).map_or(0, |s: &ModeSummary| s.rounds);
    let (verify, revise) = (count(TimingMode::Verify), count(TimingMode::Revise));
    let revision_rate = ratio(revise as u64, (verify + revise) as u64);
    let workflow_mean_s = mean_s(records.iter().filter(|r| !r.mode.is_manual())).map(|(_, m)| m);
    let verify_mean = per_mode.get(&TimingMode::Verify).map(|s| s.mean_s);
    let div = |num: f64, den: Option<f64>| den.filter(|d| *d > 0.0).map(|d| num / d);
    let speedups = per_mode
        .iter()
        .filter(|(m, _)| m.is_manual())
        .map(|(m, s)| (*m, Speedup { vs_verify: div(s.mean_s, verify_mean), vs_workflow: div(s.mean_s, workflow_mean_s) }))
        .collect();
    TimingReport { per_mode, revision_rate, workflow_mean_s, speedups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn classification_fixture() {
        let m = classification_metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 0, tn: 2 }).unwrap();
        assert_abs_diff_eq!(m.precision.unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.recall.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.accuracy, 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1.unwrap(), 6.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn classification_edges() {
        let m = classification_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 2, tn: 3 }).unwrap();
        assert_eq!((m.precision, m.f1), (None, None));
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(classification_metrics(&ConfusionCounts::default()), Err(MetricsError::EmptyCounts));
        let all = ConfusionCounts::from_pairs((0..10).map(|i| (i % 2 == 0, i % 2 == 0)));
        assert_eq!(classification_metrics(&all).unwrap().accuracy, 1.0);
    }

    #[test]
    fn hits() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let m = match_hits(&[a], &[a], DEFAULT_HIT_IOU);
        assert_eq!(m.hits, [(0, 0)]);

        let small = BBox::new(2.0, 2.0, 1.0, 1.0);
        let big = BBox::new(0.0, 0.0, 20.0, 1.0 / 0.05);
        assert!(iou(&small, &big) < 0.3);
        assert_eq!(match_hits(&[small], &[big], 0.3).hits, [(0, 0)]);

        let p = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 0.0, 10.0, 10.0)];
        let m = match_hits(&p, &[BBox::new(0.5, 0.0, 10.0, 10.0)], 0.3);
        assert_eq!(m.hits.len(), 1);
        assert_eq!(m.unmatched_predictions.len(), 1);
        assert!(m.unmatched_expert.is_empty());
    }

    #[test]
    fn efficiency() {
        let m = HitMatching { hits: vec![(0, 0), (1, 1), (2, 2)], ..Default::default() };
        let s = efficiency_completeness(&m, 4, 3);
        assert_eq!((s.efficiency, s.completeness), (Some(0.75), Some(1.0)));
        let none = efficiency_completeness(&HitMatching::default(), 0, 3);
        assert_eq!((none.efficiency, none.completeness), (None, Some(0.0)));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_abs_diff_eq!(percentile(&v, 50.0), 2.5);
        assert_abs_diff_eq!(percentile(&v, 2.5), 1.075);
    }

    fn accuracy(xs: &[bool]) -> Option<f64> {
        Some(xs.iter().filter(|x| **x).count() as f64 / xs.len() as f64)
    }

    #[test]
    fn bootstrap_basics() {
        let same = [true; 8];
        let ci = bootstrap_ci(&same, accuracy, 200, 1, (2.5, 97.5)).unwrap();
        assert_eq!((ci.lo, ci.hi, ci.point), (1.0, 1.0, 1.0));
        let six = [true, true, true, true, true, false];
        let a = bootstrap_ci(&six, accuracy, 1000, 42, (2.5, 97.5)).unwrap();
        let b = bootstrap_ci(&six, accuracy, 1000, 42, (2.5, 97.5)).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= 5.0 / 6.0 && 5.0 / 6.0 <= a.hi && a.hi <= 1.0 && a.lo >= 0.0);
        assert_eq!(bootstrap_ci::<bool, _>(&[], accuracy, 10, 1, (2.5, 97.5)), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn bootstrap_skips_undefined_resamples() {
        let xs = [1.0, 2.0];
        let ci = bootstrap_ci(&xs, |s: &[f64]| (s[0] != s[1]).then_some(1.0), 500, 3, (2.5, 97.5)).unwrap();
        assert!(ci.n_valid < 500 && ci.n_valid > 0);
    }

    #[test]
    fn paired_test_rules() {
        let a = [true, false, true, true];
        let t = paired_bootstrap_test(&a, &a, accuracy, 100, 5).unwrap();
        assert_eq!((t.p_value, t.mean_diff), (1.0, 0.0));
        assert!(matches!(
            paired_bootstrap_test(&a, &a[..3], accuracy, 100, 5),
            Err(MetricsError::LengthMismatch(4, 3))
        ));
        let all = [true; 4];
        let none = [false; 4];
        let t = paired_bootstrap_test(&all, &none, accuracy, 100, 5).unwrap();
        assert_eq!(t.p_value, 0.0);
    }

    #[test]
    fn bce() {
        assert!(bce_loss(&[true], &[1.0 - BCE_EPS]).unwrap() < 1e-11);
        assert_abs_diff_eq!(bce_loss(&[true, false], &[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce_loss(&[false], &[0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce_loss(&[true], &[0.0]).unwrap().is_finite());
        assert_eq!(bce_loss(&[true], &[]), Err(MetricsError::LengthMismatch(1, 0)));
    }

    fn rec(mode: TimingMode, write: u64, nav: Option<u64>) -> TimingRecord {
        TimingRecord { round_id: "r".into(), mode, t_write_ms: write, t_nav_expert_ms: nav }
    }

    #[test]
    fn timing() {
        assert_eq!(rec(TimingMode::ManualTyping, 50_000, Some(10_000)).adjusted_ms(), 60_000);
        let r = timing_summary(&[rec(TimingMode::Verify, 12_100, None), rec(TimingMode::ManualTyping, 96_200, Some(10_000))]);
        assert_abs_diff_eq!(r.speedups[&TimingMode::ManualTyping].vs_verify.unwrap(), 106.2 / 12.1, epsilon = 1e-9);
        assert_eq!(r.revision_rate, Some(0.0));
        assert_eq!(timing_summary(&[]).revision_rate, None);
    }
}
