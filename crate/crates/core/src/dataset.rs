//! Annotated record schema, validation, corpus statistics and the
//! judge / rank curation steps.
//!
//! Records live one per line in JSONL files with the fields `id`, `source`,
//! `media`, `task`, `question`, `options`, `think`, `clue`, `answer`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatModel, ChatRequest, GatewayError};
use crate::protocol::format_clue;
use crate::rewards::AnswerKind;
use crate::spacetime::{Clue, ClueKind};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("model unavailable: {0}")]
    ModelUnavailable(#[from] GatewayError),
    #[error("no KEEP/DROP verdict in judge output {raw:?}")]
    UnparseableVerdict { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    VideoQa,
    TemporalClue,
    ImageReasoning,
    SpatialClue,
    Tracking,
    GroundedQa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::VideoQa,
        TaskKind::TemporalClue,
        TaskKind::ImageReasoning,
        TaskKind::SpatialClue,
        TaskKind::Tracking,
        TaskKind::GroundedQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::VideoQa => "video_qa",
            TaskKind::TemporalClue => "temporal_clue",
            TaskKind::ImageReasoning => "image_reasoning",
            TaskKind::SpatialClue => "spatial_clue",
            TaskKind::Tracking => "tracking",
            TaskKind::GroundedQa => "grounded_qa",
        }
    }

    pub fn media_kind(self) -> MediaKind {
        match self {
            TaskKind::ImageReasoning | TaskKind::SpatialClue => MediaKind::Image,
            _ => MediaKind::Video,
        }
    }

    pub fn clue_kind(self) -> ClueKind {
        match self {
            TaskKind::VideoQa | TaskKind::TemporalClue | TaskKind::GroundedQa => ClueKind::Temporal,
            TaskKind::ImageReasoning | TaskKind::SpatialClue => ClueKind::Spatial,
            TaskKind::Tracking => ClueKind::BoxSequence,
        }
    }

    pub fn requires_clue(self) -> bool {
        matches!(
            self,
            TaskKind::TemporalClue | TaskKind::SpatialClue | TaskKind::Tracking | TaskKind::GroundedQa
        )
    }

    pub fn requires_answer(self) -> bool {
        matches!(self, TaskKind::VideoQa | TaskKind::ImageReasoning | TaskKind::GroundedQa)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Video,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl MediaRef {
    pub fn inline_probe(&self) -> MediaProbe {
        MediaProbe {
            duration: self.duration,
            width: self.width,
            height: self.height,
        }
    }
}

/// Measured media properties; any field may be unknown.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MediaProbe {
    pub duration: Option<f64>,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

impl MediaProbe {
    /// Fills unknown fields from `other`.
    pub fn or(self, other: MediaProbe) -> MediaProbe {
        MediaProbe {
            duration: self.duration.or(other.duration),
            width: self.width.or(other.width),
            height: self.height.or(other.height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Drop { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub media: MediaRef,
    pub task: TaskKind,
    #[serde(default)]
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default)]
    pub think: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clue: Option<Clue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<Verdict>,
}

/// Frames sampled for tracking when the record has no box sequence.
pub const DEFAULT_TRACKING_FRAMES: usize = 8;

static LETTER_ANSWER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\(?[A-E]\)?(?:[.:]|\s|$)").unwrap());

impl Record {
    /// Box-sequence length the response should carry for tracking records.
    pub fn sequence_len(&self) -> usize {
        match &self.clue {
            Some(Clue::Track(seq)) => seq.len(),
            _ => DEFAULT_TRACKING_FRAMES,
        }
    }

    pub fn answer_kind(&self) -> AnswerKind {
        let letter = self.answer.as_deref().is_some_and(|a| LETTER_ANSWER.is_match(a));
        if self.options.is_some() || letter {
            AnswerKind::Mcq
        } else {
            AnswerKind::Exact
        }
    }

    /// Question followed by the options, one per line.
    pub fn question_text(&self) -> String {
        let mut q = self.question.clone();
        if let Some(opts) = &self.options {
            q.push_str("\nOptions:");
            for o in opts {
                q.push('\n');
                q.push_str(o);
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    MissingQuestion,
    MissingThink,
    MissingClue,
    MissingAnswer,
    KindMismatch { expected: ClueKind, found: ClueKind },
    MediaKindMismatch { expected: MediaKind, found: MediaKind },
    ClueOutOfBounds { clue: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingQuestion => f.write_str("MissingQuestion"),
            Violation::MissingThink => f.write_str("MissingThink"),
            Violation::MissingClue => f.write_str("MissingClue"),
            Violation::MissingAnswer => f.write_str("MissingAnswer"),
            Violation::KindMismatch { expected, found } => {
                write!(f, "KindMismatch (expected {expected} clue, found {found})")
            }
            Violation::MediaKindMismatch { expected, found } => {
                write!(f, "MediaKindMismatch (expected {expected:?}, found {found:?})")
            }
            Violation::ClueOutOfBounds { clue } => write!(f, "ClueOutOfBounds {clue}"),
        }
    }
}

fn clue_in_bounds(clue: &Clue, probe: &MediaProbe) -> bool {
    let in_box = |b: &crate::spacetime::BoundingBox| {
        b.x1() >= 0.0
            && b.y1() >= 0.0
            && probe.width.is_none_or(|w| b.x2() <= w as f64)
            && probe.height.is_none_or(|h| b.y2() <= h as f64)
    };
    match clue {
        Clue::Temporal(i) => i.start() >= 0.0 && probe.duration.is_none_or(|d| i.end() <= d),
        Clue::Spatial(b) => in_box(b),
        Clue::Track(seq) => seq.boxes().iter().all(in_box),
    }
}

/// Checks a record against the schema rules and the probed media bounds.
/// `probe` overrides whatever the record states inline.
pub fn validate_record(rec: &Record, probe: Option<&MediaProbe>) -> Vec<Violation> {
    let probe = probe.copied().unwrap_or_default().or(rec.media.inline_probe());
    let mut out = Vec::new();
    if rec.question.trim().is_empty() {
        out.push(Violation::MissingQuestion);
    }
    if rec.think.trim().is_empty() {
        out.push(Violation::MissingThink);
    }
    let expected_media = rec.task.media_kind();
    if rec.media.kind != expected_media {
        out.push(Violation::MediaKindMismatch {
            expected: expected_media,
            found: rec.media.kind,
        });
    }
    match &rec.clue {
        None if rec.task.requires_clue() => out.push(Violation::MissingClue),
        None => {}
        Some(clue) => {
            let expected = rec.task.clue_kind();
            if clue.kind() != expected {
                out.push(Violation::KindMismatch {
                    expected,
                    found: clue.kind(),
                });
            } else if !clue_in_bounds(clue, &probe) {
                out.push(Violation::ClueOutOfBounds { clue: format_clue(clue) });
            }
        }
    }
    if rec.task.requires_answer() && rec.answer.as_deref().is_none_or(|a| a.trim().is_empty()) {
        out.push(Violation::MissingAnswer);
    }
    out
}

/// Per-source (or corpus-wide) annotation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationCounts {
    pub records: usize,
    pub temporal_clues: usize,
    pub spatial_clues: usize,
    pub thinks: usize,
    pub qa_pairs: usize,
}

impl AnnotationCounts {
    fn add(&mut self, other: &AnnotationCounts) {
        self.records += other.records;
        self.temporal_clues += other.temporal_clues;
        self.spatial_clues += other.spatial_clues;
        self.thinks += other.thinks;
        self.qa_pairs += other.qa_pairs;
    }

    fn of(rec: &Record) -> Self {
        Self {
            records: 1,
            temporal_clues: matches!(rec.clue, Some(Clue::Temporal(_))) as usize,
            spatial_clues: matches!(rec.clue, Some(Clue::Spatial(_) | Clue::Track(_))) as usize,
            thinks: !rec.think.trim().is_empty() as usize,
            qa_pairs: rec.answer.as_deref().is_some_and(|a| !a.trim().is_empty()) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub totals: AnnotationCounts,
    pub by_task: BTreeMap<TaskKind, usize>,
    pub by_source: BTreeMap<String, AnnotationCounts>,
    /// Ids seen more than once, sorted.
    pub duplicate_ids: Vec<String>,
}

/// Single-pass, mergeable accumulator behind [`corpus_stats`].
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    by_task: BTreeMap<TaskKind, usize>,
    by_source: BTreeMap<String, AnnotationCounts>,
    ids: HashMap<String, usize>,
}

impl StatsAccumulator {
    pub fn add(&mut self, rec: &Record) {
        *self.by_task.entry(rec.task).or_default() += 1;
        self.by_source
            .entry(rec.source.clone())
            .or_default()
            .add(&AnnotationCounts::of(rec));
        *self.ids.entry(rec.id.clone()).or_default() += 1;
    }

    pub fn merge(&mut self, other: StatsAccumulator) {
        for (k, v) in other.by_task {
            *self.by_task.entry(k).or_default() += v;
        }
        for (k, v) in other.by_source {
            self.by_source.entry(k).or_default().add(&v);
        }
        for (k, v) in other.ids {
            *self.ids.entry(k).or_default() += v;
        }
    }

    pub fn finish(self) -> CorpusStats {
        let mut totals = AnnotationCounts::default();
        for c in self.by_source.values() {
            totals.add(c);
        }
        let mut duplicate_ids: Vec<String> = self.ids.into_iter().filter(|(_, n)| *n > 1).map(|(id, _)| id).collect();
        duplicate_ids.sort();
        CorpusStats {
            totals,
            by_task: self.by_task,
            by_source: self.by_source,
            duplicate_ids,
        }
    }
}

pub fn corpus_stats<'a>(records: impl IntoIterator<Item = &'a Record>) -> CorpusStats {
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.add(r);
    }
    acc.finish()
}

/// One parsed line of a JSONL file.
pub type LineResult = Result<Record, DatasetError>;

/// Reads records, keeping per-line parse failures. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<LineResult>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<Record>(&line).map_err(|e| DatasetError::Json {
            line: i + 1,
            message: e.to_string(),
        }));
    }
    Ok(out)
}

/// Reads records, failing on the first malformed line.
pub fn load_records(path: &Path) -> Result<Vec<Record>, DatasetError> {
    read_jsonl(path)?.into_iter().collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub const JUDGE_PROMPT: &str = "You are auditing an annotated visual question-answering sample.\n\
Decide whether the question, options, reasoning, clue and answer are mutually consistent \
and consistent with the caption of the visual content.\n\n\
Caption:\n{caption}\n\n\
Question:\n{question}\n\n\
Reasoning:\n{think}\n\n\
Clue: {clue}\n\
Answer: {answer}\n\n\
Reply with exactly one line: either KEEP, or DROP: <short reason>.";

pub const RANK_PROMPT: &str = "You are ranking candidate question / chain-of-thought pairs \
for the same visual input, from most to least faithful and useful.\n\n\
{candidates}\n\
Reply with the candidate numbers from best to worst as a comma-separated list, for example 2,1,3.";

pub fn render_judge_prompt(rec: &Record, caption: &str) -> String {
    JUDGE_PROMPT
        .replace("{caption}", caption)
        .replace("{question}", &rec.question_text())
        .replace("{think}", &rec.think)
        .replace("{clue}", &rec.clue.as_ref().map(format_clue).unwrap_or_else(|| "none".into()))
        .replace("{answer}", rec.answer.as_deref().unwrap_or("none"))
}

static VERDICT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)\A\s*(KEEP|DROP)\b[ \t]*[:\-]?[ \t]*(.*)").unwrap());

pub fn parse_verdict(text: &str) -> Result<Verdict, DatasetError> {
    let caps = VERDICT_RE.captures(text).ok_or_else(|| DatasetError::UnparseableVerdict { raw: text.to_string() })?;
    Ok(match &caps[1] {
        "KEEP" => Verdict::Keep,
        _ => Verdict::Drop {
            reason: caps[2].trim().to_string(),
        },
    })
}

pub async fn judge_consistency(rec: &Record, caption: &str, judge: &dyn ChatModel) -> Result<Verdict, DatasetError> {
    let reply = judge.complete(&ChatRequest::text(render_judge_prompt(rec, caption))).await?;
    parse_verdict(&reply)
}

#[derive(Debug, Clone, Default)]
pub struct JudgeSummary {
    pub kept: Vec<Record>,
    pub dropped: Vec<Record>,
    /// Records whose verdict could not be obtained, with the reason.
    pub quarantined: Vec<(Record, String)>,
}

/// Judges every record with at most `concurrency` calls in flight. Output
/// order follows input order within each bucket; verdicts are stored on the
/// records.
pub async fn run_judge<F>(records: Vec<Record>, caption: F, judge: &dyn ChatModel, concurrency: usize) -> JudgeSummary
where
    F: Fn(&Record) -> String,
{
    let jobs = records.into_iter().map(|rec| {
        let cap = caption(&rec);
        async move {
            let verdict = judge_consistency(&rec, &cap, judge).await;
            (rec, verdict)
        }
    });
    let results: Vec<_> = stream::iter(jobs).buffered(concurrency.max(1)).collect().await;
    let mut summary = JudgeSummary::default();
    for (mut rec, verdict) in results {
        match verdict {
            Ok(v) => {
                let keep = v == Verdict::Keep;
                rec.judge = Some(v);
                if keep {
                    summary.kept.push(rec);
                } else {
                    summary.dropped.push(rec);
                }
            }
            Err(e) => summary.quarantined.push((rec, e.to_string())),
        }
    }
    summary
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub record: Record,
    pub cot: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    /// Candidates best first.
    pub ranked: Vec<Candidate>,
    /// Zero-based input indices in ranked order.
    pub order: Vec<usize>,
    /// The ranker's reply was not a permutation; input order was kept.
    pub invalid_permutation: bool,
}

static PERMUTATION_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+(?:\s*,\s*\d+)*").unwrap());

/// Reads a one-based comma-separated permutation of `1..=n`, returning
/// zero-based indices.
pub fn parse_permutation(text: &str, n: usize) -> Option<Vec<usize>> {
    let m = PERMUTATION_RE.find(text)?;
    let order: Vec<usize> = m
        .as_str()
        .split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&v| v >= 1 && v <= n).map(|v| v - 1))
        .collect::<Option<_>>()?;
    let mut seen = vec![false; n];
    if order.len() != n {
        return None;
    }
    for &i in &order {
        if std::mem::replace(&mut seen[i], true) {
            return None;
        }
    }
    Some(order)
}

pub fn render_rank_prompt(candidates: &[Candidate]) -> String {
    let mut body = String::new();
    for (i, c) in candidates.iter().enumerate() {
        body.push_str(&format!(
            "Candidate {}:\nQuestion: {}\nReasoning: {}\n\n",
            i + 1,
            c.record.question_text(),
            c.cot
        ));
    }
    RANK_PROMPT.replace("{candidates}", &body)
}

pub async fn rank_candidates(candidates: Vec<Candidate>, ranker: &dyn ChatModel) -> Result<RankOutcome, DatasetError> {
    let n = candidates.len();
    if n <= 1 {
        return Ok(RankOutcome {
            order: (0..n).collect(),
            ranked: candidates,
            invalid_permutation: false,
        });
    }
    let reply = ranker.complete(&ChatRequest::text(render_rank_prompt(&candidates))).await?;
    let (order, invalid) = match parse_permutation(&reply, n) {
        Some(order) => (order, false),
        None => ((0..n).collect(), true),
    };
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    let ranked = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();
    Ok(RankOutcome {
        ranked,
        order,
        invalid_permutation: invalid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockModel, MockScript};
    use crate::spacetime::{BoundingBox, TemporalInterval};

    fn charades() -> Record {
        serde_json::from_str(
            r#"{"id":"ch-1","source":"Charades","media":{"kind":"video","path":"a.mp4","duration":30.0},
                "task":"temporal_clue","question":"When does the person open the door?",
                "think":"The door opens after she stands.","clue":[6.0,11.9]}"#,
        )
        .unwrap()
    }

    #[test]
    fn valid_record_has_no_violations() {
        assert!(validate_record(&charades(), None).is_empty());
    }

    #[test]
    fn out_of_bounds_clue() {
        let mut r = charades();
        r.clue = Some(Clue::Temporal(TemporalInterval::new(40.0, 50.0).unwrap()));
        assert_eq!(
            validate_record(&r, None),
            vec![Violation::ClueOutOfBounds { clue: "[40.0, 50.0]".into() }]
        );
        // external probe takes precedence
        r.clue = Some(Clue::Temporal(TemporalInterval::new(6.0, 11.9).unwrap()));
        let probe = MediaProbe { duration: Some(10.0), ..Default::default() };
        assert_eq!(validate_record(&r, Some(&probe)).len(), 1);
    }

    #[test]
    fn missing_think_on_qa() {
        let mut r = charades();
        r.task = TaskKind::VideoQa;
        r.think = String::new();
        r.clue = None;
        r.answer = Some("B".into());
        assert_eq!(validate_record(&r, None), vec![Violation::MissingThink]);
    }

    #[test]
    fn kind_mismatch_and_missing_fields() {
        let mut r = charades();
        r.clue = Some(Clue::Spatial(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()));
        assert_eq!(
            validate_record(&r, None),
            vec![Violation::KindMismatch { expected: ClueKind::Temporal, found: ClueKind::Spatial }]
        );
        r.task = TaskKind::GroundedQa;
        r.clue = None;
        assert_eq!(validate_record(&r, None), vec![Violation::MissingClue, Violation::MissingAnswer]);
    }

    #[test]
    fn record_roundtrip_is_bit_exact() {
        let r = charades();
        let a = serde_json::to_string(&r).unwrap();
        let back: Record = serde_json::from_str(&a).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    #[test]
    fn stats_counts() {
        let mut recs = Vec::new();
        for i in 0..3 {
            let mut r = charades();
            r.id = format!("t{i}");
            recs.push(r);
        }
        for i in 0..2 {
            let mut r = charades();
            r.id = format!("s{i}");
            r.source = "RefCOCO".into();
            r.task = TaskKind::SpatialClue;
            r.media.kind = MediaKind::Image;
            r.clue = Some(Clue::Spatial(BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap()));
            recs.push(r);
        }
        recs.push(recs[0].clone());
        let s = corpus_stats(&recs);
        assert_eq!((s.totals.temporal_clues, s.totals.spatial_clues), (4, 2));
        assert_eq!(s.totals.records, 6);
        assert_eq!(s.duplicate_ids, vec!["t0".to_string()]);
        assert_eq!(s.by_task[&TaskKind::SpatialClue], 2);

        let empty = corpus_stats(&[]);
        assert_eq!(empty.totals, AnnotationCounts::default());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("KEEP").unwrap(), Verdict::Keep);
        assert_eq!(
            parse_verdict("DROP: clue irrelevant").unwrap(),
            Verdict::Drop { reason: "clue irrelevant".into() }
        );
        assert!(matches!(
            parse_verdict("I think this sample looks fine overall."),
            Err(DatasetError::UnparseableVerdict { .. })
        ));
        assert!(parse_verdict("KEEPER").is_err());
    }

    #[test]
    fn permutation_parsing() {
        assert_eq!(parse_permutation("2,1,3", 3), Some(vec![1, 0, 2]));
        assert_eq!(parse_permutation("Ranking: 3, 1, 2", 3), Some(vec![2, 0, 1]));
        assert_eq!(parse_permutation("2,2", 2), None);
        assert_eq!(parse_permutation("1,2", 3), None);
        assert_eq!(parse_permutation("0,1", 2), None);
    }

    #[tokio::test]
    async fn judge_with_mock() {
        let judge = MockModel::new(MockScript::constant("DROP: clue irrelevant"));
        let v = judge_consistency(&charades(), "a woman opens a door", &judge).await.unwrap();
        assert_eq!(v, Verdict::Drop { reason: "clue irrelevant".into() });
        let judge = MockModel::new(MockScript::constant("KEEP"));
        assert_eq!(judge_consistency(&charades(), "", &judge).await.unwrap(), Verdict::Keep);
    }

    #[tokio::test]
    async fn judge_pipeline_conserves_records() {
        let script = MockScript::default()
            .with_default("maybe?")
            .on_contains("about the zebra", "KEEP")
            .on_contains("about the ball", "DROP: mismatch");
        let judge = MockModel::new(script);
        let mut recs = Vec::new();
        for (i, q) in ["zebra", "ball", "cat", "zebra"].iter().enumerate() {
            let mut r = charades();
            r.id = format!("r{i}");
            r.question = format!("What about the {q}?");
            recs.push(r);
        }
        let s = run_judge(recs, |_| String::new(), &judge, 2).await;
        assert_eq!((s.kept.len(), s.dropped.len(), s.quarantined.len()), (2, 1, 1));
        assert_eq!(s.kept[0].judge, Some(Verdict::Keep));
        assert_eq!(s.quarantined[0].0.id, "r2");
    }

    #[tokio::test]
    async fn ranking_with_mock() {
        let cands: Vec<Candidate> = (0..3)
            .map(|i| {
                let mut r = charades();
                r.id = format!("c{i}");
                Candidate { record: r, cot: format!("cot {i}") }
            })
            .collect();
        let ranker = MockModel::new(MockScript::constant("2,1,3"));
        let out = rank_candidates(cands.clone(), &ranker).await.unwrap();
        assert_eq!(out.order, vec![1, 0, 2]);
        assert_eq!(out.ranked[0].record.id, "c1");
        assert!(!out.invalid_permutation);

        let bad = MockModel::new(MockScript::constant("2,2"));
        let out = rank_candidates(cands[..2].to_vec(), &bad).await.unwrap();
        assert!(out.invalid_permutation);
        assert_eq!(out.order, vec![0, 1]);

        let unused = MockModel::new(MockScript::constant("nonsense"));
        let out = rank_candidates(cands[..1].to_vec(), &unused).await.unwrap();
        assert_eq!(out.order, vec![0]);
        assert_eq!(unused.calls(), 0);
    }
}
