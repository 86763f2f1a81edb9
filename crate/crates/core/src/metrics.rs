//! Grounding, grounded-QA, tracking and accuracy statistics with
//! order-independent accumulators, plus report emission.
//!
//! Ratios are summed exactly as 64.64 fixed-point integers, so any
//! permutation or partition of the input produces bit-identical results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{answer_reward, AnswerKind};
use crate::spacetime::{interval_iou, Ratio, TemporalInterval};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("{preds} predictions for {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("metric `{0}` has zero samples")]
    ZeroCount(String),
    #[error("metric `{0}` is not finite")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub const GROUNDING_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const IOP_THRESHOLDS: [f64; 2] = [0.3, 0.5];
pub const TRACKING_THRESHOLDS: [f64; 2] = [0.5, 0.75];

/// Which overlap gates Acc@GQA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GqaRule {
    /// Same rule as Acc@IoP@0.5.
    #[default]
    IopAtHalf,
    IouAtHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Use `>` instead of `>=` for every threshold.
    pub strict: bool,
    pub gqa_rule: GqaRule,
}

impl MetricOptions {
    pub fn passes(&self, value: f64, threshold: f64) -> bool {
        if self.strict {
            value > threshold
        } else {
            value >= threshold
        }
    }
}

const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

/// Exact sum of values in `[0, 1]`, truncated at 2^-64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExactSum(u128);

impl ExactSum {
    pub fn add(&mut self, r: Ratio) {
        self.0 += (r.get() * SCALE) as u128;
    }

    pub fn merge(&mut self, other: ExactSum) {
        self.0 += other.0;
    }

    pub fn mean(&self, count: u64) -> f64 {
        if count == 0 {
            return 0.0;
        }
        (self.0 as f64 / SCALE) / count as f64
    }
}

fn fraction(hits: u64, count: u64) -> f64 {
    if count == 0 {
        0.0
    } else {
        hits as f64 / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalMetrics {
    pub miou: f64,
    /// Recall at 0.3, 0.5, 0.7.
    pub recall: [f64; 3],
    pub count: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TemporalAccumulator {
    opts: MetricOptions,
    sum: ExactSum,
    hits: [u64; 3],
    count: u64,
}

impl TemporalAccumulator {
    pub fn new(opts: MetricOptions) -> Self {
        Self { opts, ..Self::default() }
    }

    pub fn add(&mut self, iou: Ratio) {
        self.sum.add(iou);
        for (h, &t) in self.hits.iter_mut().zip(&GROUNDING_THRESHOLDS) {
            *h += self.opts.passes(iou.get(), t) as u64;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum.merge(other.sum);
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<TemporalMetrics, MetricError> {
        if self.count == 0 {
            return Err(MetricError::EmptyInput);
        }
        Ok(TemporalMetrics {
            miou: self.sum.mean(self.count),
            recall: self.hits.map(|h| fraction(h, self.count)),
            count: self.count,
        })
    }
}

pub fn temporal_grounding_metrics(
    pairs: &[(TemporalInterval, TemporalInterval)],
    opts: MetricOptions,
) -> Result<TemporalMetrics, MetricError> {
    let mut acc = TemporalAccumulator::new(opts);
    for (pred, gt) in pairs {
        acc.add(interval_iou(pred, gt));
    }
    acc.finish()
}

/// Recall / mIoU over precomputed overlaps; also used for spatial grounding.
pub fn grounding_metrics_from_ious(ious: &[Ratio], opts: MetricOptions) -> Result<TemporalMetrics, MetricError> {
    let mut acc = TemporalAccumulator::new(opts);
    ious.iter().for_each(|&r| acc.add(r));
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedRecord {
    pub qa_correct: bool,
    pub iop: Ratio,
    pub iou: Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedQaMetrics {
    pub acc_iop_05: f64,
    pub acc_gqa: f64,
    pub miop: f64,
    /// IoP at 0.3, 0.5.
    pub iop_at: [f64; 2],
    pub miou: f64,
    pub accuracy: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GroundedAccumulator {
    opts: MetricOptions,
    iop_sum: ExactSum,
    iou_sum: ExactSum,
    iop_hits: [u64; 2],
    acc_iop: u64,
    acc_gqa: u64,
    correct: u64,
    count: u64,
}

impl GroundedAccumulator {
    pub fn new(opts: MetricOptions) -> Self {
        Self { opts, ..Self::default() }
    }

    pub fn add(&mut self, r: &GroundedRecord) {
        let o = self.opts;
        self.iop_sum.add(r.iop);
        self.iou_sum.add(r.iou);
        for (h, &t) in self.iop_hits.iter_mut().zip(&IOP_THRESHOLDS) {
            *h += o.passes(r.iop.get(), t) as u64;
        }
        self.acc_iop += (r.qa_correct && o.passes(r.iop.get(), 0.5)) as u64;
        let gqa_overlap = match o.gqa_rule {
            GqaRule::IopAtHalf => r.iop,
            GqaRule::IouAtHalf => r.iou,
        };
        self.acc_gqa += (r.qa_correct && o.passes(gqa_overlap.get(), 0.5)) as u64;
        self.correct += r.qa_correct as u64;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.iop_sum.merge(other.iop_sum);
        self.iou_sum.merge(other.iou_sum);
        for (a, b) in self.iop_hits.iter_mut().zip(other.iop_hits) {
            *a += b;
        }
        self.acc_iop += other.acc_iop;
        self.acc_gqa += other.acc_gqa;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<GroundedQaMetrics, MetricError> {
        let n = self.count;
        if n == 0 {
            return Err(MetricError::EmptyInput);
        }
        Ok(GroundedQaMetrics {
            acc_iop_05: fraction(self.acc_iop, n),
            acc_gqa: fraction(self.acc_gqa, n),
            miop: self.iop_sum.mean(n),
            iop_at: self.iop_hits.map(|h| fraction(h, n)),
            miou: self.iou_sum.mean(n),
            accuracy: fraction(self.correct, n),
            count: n,
        })
    }
}

pub fn grounded_qa_metrics(records: &[GroundedRecord], opts: MetricOptions) -> Result<GroundedQaMetrics, MetricError> {
    let mut acc = GroundedAccumulator::new(opts);
    records.iter().for_each(|r| acc.add(r));
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub ao: f64,
    /// Success rate at 0.5, 0.75.
    pub sr: [f64; 2],
    /// Frames pooled across episodes.
    pub frames: u64,
    pub episodes: u64,
}

/// Pools frames across episodes: AO is the mean over all frames, not a
/// mean of per-episode means.
#[derive(Debug, Clone, Default)]
pub struct TrackingAccumulator {
    opts: MetricOptions,
    sum: ExactSum,
    hits: [u64; 2],
    frames: u64,
    episodes: u64,
}

impl TrackingAccumulator {
    pub fn new(opts: MetricOptions) -> Self {
        Self { opts, ..Self::default() }
    }

    pub fn add_episode(&mut self, frame_ious: &[Ratio]) -> Result<(), MetricError> {
        if frame_ious.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        for &r in frame_ious {
            self.sum.add(r);
            for (h, &t) in self.hits.iter_mut().zip(&TRACKING_THRESHOLDS) {
                *h += self.opts.passes(r.get(), t) as u64;
            }
        }
        self.frames += frame_ious.len() as u64;
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum.merge(other.sum);
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.frames += other.frames;
        self.episodes += other.episodes;
    }

    pub fn finish(&self) -> Result<TrackingMetrics, MetricError> {
        if self.frames == 0 {
            return Err(MetricError::EmptyInput);
        }
        Ok(TrackingMetrics {
            ao: self.sum.mean(self.frames),
            sr: self.hits.map(|h| fraction(h, self.frames)),
            frames: self.frames,
            episodes: self.episodes,
        })
    }
}

pub fn tracking_metrics(episodes: &[Vec<Ratio>], opts: MetricOptions) -> Result<TrackingMetrics, MetricError> {
    let mut acc = TrackingAccumulator::new(opts);
    for ep in episodes {
        acc.add_episode(ep)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccuracyAccumulator {
    correct: u64,
    count: u64,
}

impl AccuracyAccumulator {
    pub fn add(&mut self, correct: bool) {
        self.correct += correct as u64;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<Ratio, MetricError> {
        if self.count == 0 {
            return Err(MetricError::EmptyInput);
        }
        Ok(Ratio::new(fraction(self.correct, self.count)))
    }
}

/// Fraction of predictions whose multiple-choice answer matches.
pub fn mcq_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G]) -> Result<Ratio, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let mut acc = AccuracyAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        let hit = answer_reward(p.as_ref(), g.as_ref(), AnswerKind::Mcq).is_ok_and(|s| s.value == 1.0);
        acc.add(hit);
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub preset: String,
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub metrics: BTreeMap<String, MetricValue>,
}

impl MetricReport {
    pub fn new(preset: impl Into<String>, model: impl Into<String>, k: usize) -> Self {
        Self {
            preset: preset.into(),
            model: model.into(),
            k,
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64, count: u64) {
        self.metrics.insert(name.into(), MetricValue { value, count });
    }

    pub fn add_temporal(&mut self, prefix: &str, m: &TemporalMetrics) {
        self.insert(format!("{prefix}/mIoU"), m.miou, m.count);
        for (t, r) in GROUNDING_THRESHOLDS.iter().zip(m.recall) {
            self.insert(format!("{prefix}/R@{t}"), r, m.count);
        }
    }

    pub fn add_grounded(&mut self, prefix: &str, m: &GroundedQaMetrics) {
        self.insert(format!("{prefix}/Acc@IoP@0.5"), m.acc_iop_05, m.count);
        self.insert(format!("{prefix}/Acc@GQA"), m.acc_gqa, m.count);
        self.insert(format!("{prefix}/mIoP"), m.miop, m.count);
        for (t, v) in IOP_THRESHOLDS.iter().zip(m.iop_at) {
            self.insert(format!("{prefix}/IoP@{t}"), v, m.count);
        }
        self.insert(format!("{prefix}/mIoU"), m.miou, m.count);
        self.insert(format!("{prefix}/accuracy"), m.accuracy, m.count);
    }

    pub fn add_tracking(&mut self, prefix: &str, m: &TrackingMetrics) {
        self.insert(format!("{prefix}/AO"), m.ao, m.frames);
        for (t, v) in TRACKING_THRESHOLDS.iter().zip(m.sr) {
            self.insert(format!("{prefix}/SR@{t}"), v, m.frames);
        }
    }

    pub fn check(&self) -> Result<(), MetricError> {
        for (name, m) in &self.metrics {
            if m.count == 0 {
                return Err(MetricError::ZeroCount(name.clone()));
            }
            if !m.value.is_finite() {
                return Err(MetricError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, MetricError> {
        self.check()?;
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String, MetricError> {
        self.check()?;
        let mut s = String::from("metric,value,count\n");
        for (name, m) in &self.metrics {
            let _ = writeln!(s, "{name},{},{}", m.value, m.count);
        }
        Ok(s)
    }

    pub fn to_table(&self) -> Result<String, MetricError> {
        self.check()?;
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("preset: {}\nmodel:  {}\nK:      {}\n\n", self.preset, self.model, self.k);
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>7}", "metric", "value", "count");
        for (name, m) in &self.metrics {
            let _ = writeln!(s, "{name:<width$}  {:>8.4}  {:>7}", m.value, m.count);
        }
        Ok(s)
    }
}

/// Writes `path` (JSON) plus sibling `.csv` and `.txt` files. Nothing is
/// written when the report is invalid.
pub fn write_report(report: &MetricReport, path: &Path) -> Result<Vec<PathBuf>, MetricError> {
    let outputs = [
        (path.to_path_buf(), report.to_json()?),
        (path.with_extension("csv"), report.to_csv()?),
        (path.with_extension("txt"), report.to_table()?),
    ];
    let mut written = Vec::new();
    for (p, text) in outputs {
        let tmp = p.with_extension("tmp");
        let io = |source| MetricError::Io {
            path: p.display().to_string(),
            source,
        };
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, &p).map_err(io)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: f64) -> Ratio {
        Ratio::new(v)
    }

    fn iv(a: f64, b: f64) -> TemporalInterval {
        TemporalInterval::new(a, b).unwrap()
    }

    #[test]
    fn temporal_fixture() {
        let m = grounding_metrics_from_ious(&[r(1.0), r(0.4), r(0.0)], MetricOptions::default()).unwrap();
        assert!((m.miou - 0.4667).abs() < 5e-5);
        assert!((m.recall[0] - 0.667).abs() < 5e-4);
        assert!((m.recall[1] - 0.333).abs() < 5e-4);
        assert!((m.recall[2] - 0.333).abs() < 5e-4);

        let same = vec![(iv(1.0, 2.0), iv(1.0, 2.0)); 4];
        let m = temporal_grounding_metrics(&same, MetricOptions::default()).unwrap();
        assert_eq!((m.miou, m.recall), (1.0, [1.0; 3]));
        assert!(matches!(
            temporal_grounding_metrics(&[], MetricOptions::default()),
            Err(MetricError::EmptyInput)
        ));
    }

    #[test]
    fn inclusive_and_strict_thresholds() {
        let m = grounding_metrics_from_ious(&[r(0.5)], MetricOptions::default()).unwrap();
        assert_eq!(m.recall[1], 1.0);
        let strict = MetricOptions {
            strict: true,
            ..Default::default()
        };
        let m = grounding_metrics_from_ious(&[r(0.5)], strict).unwrap();
        assert_eq!(m.recall[1], 0.0);
    }

    #[test]
    fn grounded_fixture() {
        let g = |iop, c| GroundedRecord {
            qa_correct: c,
            iop: r(iop),
            iou: r(iop / 2.0),
        };
        let recs = [g(0.6, true), g(0.6, false), g(0.3, true), g(0.0, false)];
        let m = grounded_qa_metrics(&recs, MetricOptions::default()).unwrap();
        assert_eq!(m.miop, 0.375);
        assert_eq!(m.iop_at, [0.75, 0.5]);
        assert_eq!(m.acc_iop_05, 0.25);
        assert_eq!(m.acc_gqa, 0.25);
        assert_eq!(m.accuracy, 0.5);

        let all = grounded_qa_metrics(&[g(1.0, true); 3], MetricOptions::default()).unwrap();
        assert_eq!((all.miop, all.iop_at, all.acc_iop_05, all.acc_gqa), (1.0, [1.0; 2], 1.0, 1.0));
        let none = grounded_qa_metrics(&[g(0.0, false); 3], MetricOptions::default()).unwrap();
        assert_eq!((none.miop, none.iop_at, none.acc_iop_05, none.acc_gqa), (0.0, [0.0; 2], 0.0, 0.0));

        let by_iou = MetricOptions {
            gqa_rule: GqaRule::IouAtHalf,
            ..Default::default()
        };
        assert_eq!(grounded_qa_metrics(&recs, by_iou).unwrap().acc_gqa, 0.0);
    }

    #[test]
    fn tracking_fixture() {
        let m = tracking_metrics(&[vec![r(1.0), r(0.0)]], MetricOptions::default()).unwrap();
        assert_eq!((m.ao, m.sr), (0.5, [0.5, 0.5]));
        let m = tracking_metrics(&[vec![r(1.0)], vec![r(1.0), r(1.0)]], MetricOptions::default()).unwrap();
        assert_eq!((m.ao, m.sr, m.frames), (1.0, [1.0; 2], 3));
        assert!(tracking_metrics(&[], MetricOptions::default()).is_err());
        assert!(tracking_metrics(&[vec![]], MetricOptions::default()).is_err());
        // pooled over frames, not a mean of episode means
        let m = tracking_metrics(&[vec![r(1.0)], vec![r(0.0), r(0.0), r(0.0)]], MetricOptions::default()).unwrap();
        assert_eq!(m.ao, 0.25);
    }

    #[test]
    fn mcq_fixture() {
        let acc = mcq_accuracy(&["A", "B", "C. x", "D"], &["A", "B", "C", "A"]).unwrap();
        assert_eq!(acc.get(), 0.75);
        assert_eq!(mcq_accuracy(&["B"], &["B. wipe tears"]).unwrap().get(), 1.0);
        assert!(matches!(mcq_accuracy(&["A"], &["A", "B"]), Err(MetricError::LengthMismatch { .. })));
        assert!(matches!(mcq_accuracy::<&str, &str>(&[], &[]), Err(MetricError::EmptyInput)));
    }

    #[test]
    fn exact_sum_is_order_free() {
        let vals = [0.1, 0.7, 0.2, 0.3333333333333333, 1e-12];
        let mut a = ExactSum::default();
        let mut b = ExactSum::default();
        vals.iter().for_each(|&v| a.add(r(v)));
        vals.iter().rev().for_each(|&v| b.add(r(v)));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_count_is_rejected() {
        let mut rep = MetricReport::new("main-text", "mock", 3);
        rep.insert("video_qa/accuracy", 0.5, 0);
        assert!(matches!(rep.to_json(), Err(MetricError::ZeroCount(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(&rep, &dir.path().join("report.json")).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn repeated_writes_are_identical() {
        let mut rep = MetricReport::new("main-text", "mock", 3);
        rep.insert("b", 0.25, 4);
        rep.insert("a", 1.0, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        write_report(&rep, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_report(&rep, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        let text = String::from_utf8(first).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        assert!(p.with_extension("csv").exists() && p.with_extension("txt").exists());
    }
}
