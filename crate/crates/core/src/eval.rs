//! Dataset-level evaluation: runs episodes with bounded concurrency, keeps a
//! resumable trace log and aggregates a metric report per task kind.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use thiserror::Error;

use crate::dataset::{Record, TaskKind};
use crate::engine::{run_episode, EpisodeTrace, ItpConfig};
use crate::gateway::{ChatModel, FrameSource, MediaProber};
use crate::metrics::{
    AccuracyAccumulator, GroundedAccumulator, GroundedRecord, MetricError, MetricOptions, MetricReport,
    TemporalAccumulator, TrackingAccumulator,
};
use crate::rewards::answer_reward;
use crate::spacetime::{box_iou, interval_iop, interval_iou, track_frame_ious, Clue, Ratio};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const PARTIAL_TRACES_FILE: &str = "traces.partial.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("duplicate record ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub concurrency: usize,
    pub resume: bool,
    pub preset: String,
    pub model_name: String,
    pub metrics: MetricOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            concurrency: 8,
            resume: false,
            preset: "main-text".into(),
            model_name: "unknown".into(),
            metrics: MetricOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// One trace per record, in dataset order.
    pub traces: Vec<EpisodeTrace>,
    /// Episodes run by this invocation.
    pub ran: usize,
    /// Episodes taken from an earlier run.
    pub reused: usize,
    /// Ids of episodes that did not complete.
    pub incomplete: Vec<String>,
    pub report_path: PathBuf,
    pub traces_path: PathBuf,
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads whatever traces a file holds, skipping a torn final line.
fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>, EvalError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if let Ok(t) = serde_json::from_str::<EpisodeTrace>(&line) {
            out.push(t);
        }
    }
    Ok(out)
}

fn write_traces_atomic(path: &Path, traces: &[&EpisodeTrace]) -> Result<(), EvalError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for t in traces {
            writeln!(w, "{}", serde_json::to_string(t).expect("trace serializes")).map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs every record and writes `traces.jsonl` and `report.json` (plus
/// `.csv` / `.txt`) into `out_dir`. Completed traces are appended to
/// `traces.partial.jsonl` as they finish; with `resume` set, records that
/// already have a complete trace there are not run again.
pub async fn run_eval(
    records: &[Record],
    itp: &ItpConfig,
    model: &dyn ChatModel,
    frames: &dyn FrameSource,
    prober: &dyn MediaProber,
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<EvalOutcome, EvalError> {
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = records.iter().filter(|r| !seen.insert(&r.id)).map(|r| r.id.clone()).collect();
    if !dups.is_empty() {
        dups.sort();
        dups.dedup();
        return Err(EvalError::DuplicateIds(dups));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let partial = out_dir.join(PARTIAL_TRACES_FILE);
    let final_path = out_dir.join(TRACES_FILE);

    let mut done: HashMap<String, EpisodeTrace> = HashMap::new();
    if opts.resume {
        for t in read_traces(&final_path)?.into_iter().chain(read_traces(&partial)?) {
            if t.is_complete() && seen.contains(&t.id) {
                done.insert(t.id.clone(), t);
            }
        }
    }
    let mut kept: Vec<&EpisodeTrace> = records.iter().filter_map(|r| done.get(&r.id)).collect();
    kept.sort_by_key(|t| &t.id);
    write_traces_atomic(&partial, &kept)?;
    let reused = done.len();

    let mut log = OpenOptions::new().append(true).open(&partial).map_err(io_err(&partial))?;
    let pending: Vec<&Record> = records.iter().filter(|r| !done.contains_key(&r.id)).collect();
    let ran = pending.len();
    let jobs = pending.into_iter().map(|rec| async move {
        match run_episode(rec, itp, model, frames, prober).await {
            Ok(t) => t,
            Err(e) => {
                tracing::error!(id = %rec.id, error = %e, "episode failed");
                EpisodeTrace::failed(rec, e)
            }
        }
    });
    let mut finished = stream::iter(jobs).buffer_unordered(opts.concurrency.max(1));
    while let Some(trace) = finished.next().await {
        let line = serde_json::to_string(&trace).expect("trace serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(io_err(&partial))?;
        done.insert(trace.id.clone(), trace);
    }
    drop(log);

    let traces: Vec<EpisodeTrace> = records.iter().map(|r| done.remove(&r.id).expect("every record ran")).collect();
    write_traces_atomic(&final_path, &traces.iter().collect::<Vec<_>>())?;
    fs::remove_file(&partial).map_err(io_err(&partial))?;

    let report = build_report(records, &traces, &opts.preset, &opts.model_name, itp.iterations, opts.metrics)?;
    let report_path = out_dir.join(REPORT_FILE);
    crate::metrics::write_report(&report, &report_path)?;
    let incomplete = traces.iter().filter(|t| !t.is_complete()).map(|t| t.id.clone()).collect();
    Ok(EvalOutcome {
        report,
        traces,
        ran,
        reused,
        incomplete,
        report_path,
        traces_path: final_path,
    })
}

fn answer_correct(record: &Record, trace: &EpisodeTrace) -> Option<bool> {
    let gt = record.answer.as_deref()?;
    let pred = trace.final_answer.as_deref().unwrap_or("");
    Some(answer_reward(pred, gt, record.answer_kind()).is_ok_and(|s| s.value == 1.0))
}

#[derive(Default)]
struct TaskAccumulators {
    accuracy: AccuracyAccumulator,
    grounding: Option<TemporalAccumulator>,
    grounded: Option<GroundedAccumulator>,
    tracking: Option<TrackingAccumulator>,
}

/// Aggregates per-task metrics. Records and traces are matched by id; a
/// missing or incomplete trace scores as a wrong answer with no clue.
pub fn build_report(
    records: &[Record],
    traces: &[EpisodeTrace],
    preset: &str,
    model: &str,
    k: usize,
    opts: MetricOptions,
) -> Result<MetricReport, MetricError> {
    let by_id: HashMap<&str, &EpisodeTrace> = traces.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut tasks: BTreeMap<TaskKind, TaskAccumulators> = BTreeMap::new();
    for rec in records {
        let empty;
        let trace = match by_id.get(rec.id.as_str()) {
            Some(t) => *t,
            None => {
                empty = EpisodeTrace::new(rec);
                &empty
            }
        };
        let acc = tasks.entry(rec.task).or_default();
        let pred = trace.final_clue.as_ref();
        match (rec.task, rec.clue.as_ref()) {
            (TaskKind::TemporalClue, Some(Clue::Temporal(gt))) => {
                let iou = match pred {
                    Some(Clue::Temporal(p)) => interval_iou(p, gt),
                    _ => Ratio::ZERO,
                };
                acc.grounding.get_or_insert_with(|| TemporalAccumulator::new(opts)).add(iou);
            }
            (TaskKind::SpatialClue, Some(Clue::Spatial(gt))) => {
                let iou = match pred {
                    Some(Clue::Spatial(p)) => box_iou(p, gt),
                    _ => Ratio::ZERO,
                };
                acc.grounding.get_or_insert_with(|| TemporalAccumulator::new(opts)).add(iou);
            }
            (TaskKind::Tracking, Some(Clue::Track(gt))) => {
                let ious = match pred {
                    Some(Clue::Track(p)) => track_frame_ious(p, gt).unwrap_or_else(|_| vec![Ratio::ZERO; gt.len()]),
                    _ => vec![Ratio::ZERO; gt.len()],
                };
                acc.tracking
                    .get_or_insert_with(|| TrackingAccumulator::new(opts))
                    .add_episode(&ious)?;
            }
            (TaskKind::GroundedQa, Some(Clue::Temporal(gt))) => {
                let (iop, iou) = match pred {
                    Some(Clue::Temporal(p)) => (interval_iop(p, gt), interval_iou(p, gt)),
                    _ => (Ratio::ZERO, Ratio::ZERO),
                };
                let qa_correct = answer_correct(rec, trace).unwrap_or(false);
                acc.grounded
                    .get_or_insert_with(|| GroundedAccumulator::new(opts))
                    .add(&GroundedRecord { qa_correct, iop, iou });
            }
            _ => {}
        }
        if rec.task != TaskKind::GroundedQa {
            if let Some(correct) = answer_correct(rec, trace) {
                acc.accuracy.add(correct);
            }
        }
    }

    let mut report = MetricReport::new(preset, model, k);
    for (task, acc) in &tasks {
        let prefix = task.as_str();
        if acc.accuracy.count() > 0 {
            report.insert(format!("{prefix}/accuracy"), acc.accuracy.finish()?.get(), acc.accuracy.count());
        }
        if let Some(g) = &acc.grounding {
            report.add_temporal(prefix, &g.finish()?);
        }
        if let Some(g) = &acc.grounded {
            report.add_grounded(prefix, &g.finish()?);
        }
        if let Some(t) = &acc.tracking {
            report.add_tracking(prefix, &t.finish()?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{InlineProber, MockModel, MockScript, SyntheticFrames};

    fn records() -> Vec<Record> {
        (0..6)
            .map(|i| {
                let task = if i % 2 == 0 { "temporal_clue" } else { "video_qa" };
                serde_json::from_str(&format!(
                    r#"{{"id":"r{i}","source":"s","media":{{"kind":"video","path":"v{i}.mp4","duration":20.0,"width":320,"height":240}},
                        "task":"{task}","question":"q{i}?","options":["A. x","B. y"],"think":"t","clue":[2.0,6.0],"answer":"B"}}"#
                ))
                .unwrap()
            })
            .collect()
    }

    fn model() -> MockModel {
        MockModel::new(MockScript::constant("<think>t</think><clue>[2.0, 6.0]</clue><answer>B</answer>"))
    }

    #[tokio::test]
    async fn runs_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records();
        let out = run_eval(&recs, &ItpConfig::default(), &model(), &SyntheticFrames, &InlineProber, &EvalOptions::default(), dir.path())
            .await
            .unwrap();
        assert_eq!(out.ran, 6);
        assert!(out.incomplete.is_empty());
        assert_eq!(out.report.metrics["video_qa/accuracy"].value, 1.0);
        assert_eq!(out.report.metrics["temporal_clue/mIoU"].value, 1.0);
        assert_eq!(out.report.metrics["temporal_clue/R@0.7"].count, 3);
        assert!(dir.path().join(TRACES_FILE).exists());
        assert!(!dir.path().join(PARTIAL_TRACES_FILE).exists());
        let ids: Vec<String> = read_traces(&dir.path().join(TRACES_FILE)).unwrap().into_iter().map(|t| t.id).collect();
        assert_eq!(ids, recs.iter().map(|r| r.id.clone()).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn resume_skips_completed_ids() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records();
        let opts = EvalOptions {
            resume: true,
            ..EvalOptions::default()
        };
        let first = run_eval(&recs[..4], &ItpConfig::default(), &model(), &SyntheticFrames, &InlineProber, &opts, dir.path())
            .await
            .unwrap();
        assert_eq!(first.ran, 4);
        let m = model();
        let second = run_eval(&recs, &ItpConfig::default(), &m, &SyntheticFrames, &InlineProber, &opts, dir.path())
            .await
            .unwrap();
        assert_eq!((second.ran, second.reused), (2, 4));
        assert_eq!(m.calls(), 6);
    }

    #[tokio::test]
    async fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = records();
        recs.push(recs[0].clone());
        let err = run_eval(&recs, &ItpConfig::default(), &model(), &SyntheticFrames, &InlineProber, &EvalOptions::default(), dir.path())
            .await
            .unwrap_err();
        assert!(matches!(err, EvalError::DuplicateIds(ids) if ids == vec!["r0".to_string()]));
    }
}
