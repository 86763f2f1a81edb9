//! Response grammar, model-output parsing and iteration prompts.
//!
//! Every model turn is expected to consist of tag blocks in this order:
//! `<think>…</think>`, then `<clue>…</clue>` when the task wants a clue, then
//! `<answer>…</answer>` when it wants an answer. [`validate_format`] checks
//! that grammar strictly; [`parse_response`] extracts fields leniently and
//! records every deviation it had to tolerate.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TaskKind;
use crate::spacetime::{BoundingBox, BoxSequence, Clue, ClueKind, GeometryError, TemporalInterval};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("required field `{0}` not found in response")]
    MissingField(Field),
    #[error("malformed clue literal {literal:?}: {reason}")]
    MalformedClue { literal: String, reason: String },
    #[error("prompt precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Think,
    Clue,
    Answer,
}

impl Field {
    fn tag(self) -> &'static str {
        match self {
            Field::Think => "think",
            Field::Clue => "clue",
            Field::Answer => "answer",
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which blocks a response must contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub requires_think: bool,
    pub clue_kind: Option<ClueKind>,
    pub requires_answer: bool,
    /// Expected number of boxes for `BoxSequence` clues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_len: Option<usize>,
}

impl ResponseSchema {
    pub fn new(
        requires_think: bool,
        clue_kind: Option<ClueKind>,
        requires_answer: bool,
        sequence_len: Option<usize>,
    ) -> Result<Self, ProtocolError> {
        if clue_kind.is_none() && !requires_answer {
            return Err(ProtocolError::Precondition(
                "schema must require a clue or an answer".into(),
            ));
        }
        if clue_kind == Some(ClueKind::BoxSequence) && sequence_len.unwrap_or(0) == 0 {
            return Err(ProtocolError::Precondition(
                "box-sequence schema needs a sequence length >= 1".into(),
            ));
        }
        Ok(Self {
            requires_think,
            clue_kind,
            requires_answer,
            sequence_len,
        })
    }

    /// Inference schema for a task. Every kind emits a clue so that the
    /// perception loop has something to refine on.
    pub fn for_task(task: TaskKind, sequence_len: usize) -> Self {
        let (clue_kind, requires_answer) = match task {
            TaskKind::VideoQa | TaskKind::GroundedQa => (ClueKind::Temporal, true),
            TaskKind::TemporalClue => (ClueKind::Temporal, false),
            TaskKind::ImageReasoning => (ClueKind::Spatial, true),
            TaskKind::SpatialClue => (ClueKind::Spatial, false),
            TaskKind::Tracking => (ClueKind::BoxSequence, false),
        };
        Self {
            requires_think: true,
            clue_kind: Some(clue_kind),
            requires_answer,
            sequence_len: (clue_kind == ClueKind::BoxSequence).then_some(sequence_len.max(1)),
        }
    }

    pub fn requires_clue(&self) -> bool {
        self.clue_kind.is_some()
    }

    /// The exact output grammar embedded in every prompt.
    pub fn grammar(&self) -> String {
        let mut s = String::from("Reply in exactly this format, with nothing outside the tags:\n");
        s.push_str("<think>your step-by-step reasoning</think>\n");
        if let Some(kind) = self.clue_kind {
            let placeholder = match kind {
                ClueKind::Temporal => "[start_seconds, end_seconds]".to_string(),
                ClueKind::Spatial => "[x1, y1, x2, y2]".to_string(),
                ClueKind::BoxSequence => format!(
                    "[x1, y1, x2, y2], [x1, y1, x2, y2], ... ({} boxes, one per frame)",
                    self.sequence_len.unwrap_or(1)
                ),
            };
            let _ = writeln!(s, "<clue>{placeholder}</clue>");
        }
        if self.requires_answer {
            s.push_str("<answer>your final answer</answer>\n");
        }
        s
    }
}

/// A deviation tolerated while parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "repair", content = "detail")]
pub enum Repair {
    SwappedBounds,
    TextOutsideTags,
    NonCanonicalTag(Field),
    DuplicateBlock(Field),
    BlocksOutOfOrder,
    UnexpectedBlock(Field),
}

/// One model turn split into its think / clue / answer channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think: String,
    pub clue: Option<Clue>,
    pub answer: Option<String>,
    pub format_ok: bool,
    pub repairs: Vec<Repair>,
}

impl ParsedResponse {
    /// Serializes back through the canonical grammar.
    pub fn to_canonical(&self) -> String {
        let mut s = format!("<think>{}</think>", self.think);
        if let Some(clue) = &self.clue {
            let _ = write!(s, "<clue>{}</clue>", format_clue(clue));
        }
        if let Some(answer) = &self.answer {
            let _ = write!(s, "<answer>{answer}</answer>");
        }
        s
    }
}

/// Lenient extraction result: whatever could be recovered plus what could
/// not. Engine and rewards consume this directly so a sloppy response still
/// yields its usable channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub parsed: ParsedResponse,
    pub missing: Vec<Field>,
    pub clue_error: Option<ProtocolError>,
}

static BLOCK_RES: LazyLock<[(Field, Regex); 3]> = LazyLock::new(|| {
    [Field::Think, Field::Clue, Field::Answer].map(|f| {
        let re = Regex::new(&format!(r"(?is)<\s*{0}\s*>(.*?)<\s*/\s*{0}\s*>", f.tag())).unwrap();
        (f, re)
    })
});

static ANY_TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*/?\s*(think|clue|answer)\s*>").unwrap());

fn grammar(think_required: bool, clue: bool, answer: bool) -> Regex {
    let mut pattern = String::from(r"(?s)\A\s*");
    if think_required {
        pattern.push_str(r"<think>(?P<think>.*?)</think>\s*");
    } else {
        pattern.push_str(r"(?:<think>(?P<think>.*?)</think>\s*)?");
    }
    if clue {
        pattern.push_str(r"<clue>(?P<clue>.*?)</clue>\s*");
    }
    if answer {
        pattern.push_str(r"<answer>(?P<answer>.*?)</answer>\s*");
    }
    pattern.push_str(r"\z");
    Regex::new(&pattern).expect("static grammar pattern")
}

// Indexed by think | clue << 1 | answer << 2.
static GRAMMAR_RES: LazyLock<[Regex; 8]> =
    LazyLock::new(|| std::array::from_fn(|i| grammar(i & 1 != 0, i & 2 != 0, i & 4 != 0)));

/// Strict grammar check used for the format reward.
pub fn validate_format(raw: &str, schema: &ResponseSchema) -> bool {
    let idx = schema.requires_think as usize | (schema.requires_clue() as usize) << 1 | (schema.requires_answer as usize) << 2;
    let re = &GRAMMAR_RES[idx];
    let Some(caps) = re.captures(raw) else {
        return false;
    };
    for name in ["think", "clue", "answer"] {
        if let Some(m) = caps.name(name) {
            if ANY_TAG_RE.is_match(m.as_str()) {
                return false;
            }
        }
    }
    match (schema.clue_kind, caps.name("clue")) {
        (Some(kind), Some(m)) => matches!(parse_clue(m.as_str(), kind), Ok((_, false))),
        _ => true,
    }
}

/// Lenient parse. Fails only when a required field is absent or a clue
/// literal is unreadable; see [`extract`] for the non-failing variant.
pub fn parse_response(raw: &str, schema: &ResponseSchema) -> Result<ParsedResponse, ProtocolError> {
    let ex = extract(raw, schema);
    if let Some(err) = ex.clue_error {
        return Err(err);
    }
    if let Some(&field) = ex.missing.first() {
        return Err(ProtocolError::MissingField(field));
    }
    Ok(ex.parsed)
}

pub fn extract(raw: &str, schema: &ResponseSchema) -> Extraction {
    let mut repairs = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut found: [Option<(usize, String)>; 3] = [None, None, None];

    for (slot, (field, re)) in BLOCK_RES.iter().enumerate() {
        let mut matches = re.captures_iter(raw);
        if let Some(first) = matches.next() {
            let whole = first.get(0).unwrap();
            let canonical = format!("<{0}>{1}</{0}>", field.tag(), &first[1]);
            if whole.as_str() != canonical {
                repairs.push(Repair::NonCanonicalTag(*field));
            }
            spans.push((whole.start(), whole.end()));
            found[slot] = Some((whole.start(), first[1].trim().to_string()));
            for extra in matches {
                let m = extra.get(0).unwrap();
                spans.push((m.start(), m.end()));
                repairs.push(Repair::DuplicateBlock(*field));
            }
        }
    }

    spans.sort_unstable();
    let mut cursor = 0;
    let mut outside = false;
    for &(s, e) in &spans {
        if s >= cursor {
            outside |= !raw[cursor..s].trim().is_empty();
        }
        cursor = cursor.max(e);
    }
    outside |= !raw[cursor.min(raw.len())..].trim().is_empty();
    if outside {
        repairs.push(Repair::TextOutsideTags);
    }

    let positions: Vec<usize> = found.iter().flatten().map(|(p, _)| *p).collect();
    if positions.windows(2).any(|w| w[0] > w[1]) {
        repairs.push(Repair::BlocksOutOfOrder);
    }

    let [think, clue_text, answer] = found;
    let mut missing = Vec::new();
    if think.is_none() && schema.requires_think {
        missing.push(Field::Think);
    }
    if clue_text.is_none() && schema.requires_clue() {
        missing.push(Field::Clue);
    }
    if answer.is_none() && schema.requires_answer {
        missing.push(Field::Answer);
    }
    if clue_text.is_some() && !schema.requires_clue() {
        repairs.push(Repair::UnexpectedBlock(Field::Clue));
    }
    if answer.is_some() && !schema.requires_answer {
        repairs.push(Repair::UnexpectedBlock(Field::Answer));
    }

    let mut clue = None;
    let mut clue_error = None;
    if let (Some(kind), Some((_, text))) = (schema.clue_kind, &clue_text) {
        match parse_clue(text, kind) {
            Ok((c, swapped)) => {
                if swapped {
                    repairs.push(Repair::SwappedBounds);
                }
                clue = Some(c);
            }
            Err(e) => clue_error = Some(e),
        }
    }

    let format_ok = validate_format(raw, schema);
    Extraction {
        parsed: ParsedResponse {
            think: think.map(|(_, t)| t).unwrap_or_default(),
            clue,
            answer: answer.map(|(_, a)| a),
            format_ok,
            repairs,
        },
        missing,
        clue_error,
    }
}

fn malformed(literal: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedClue {
        literal: literal.to_string(),
        reason: reason.into(),
    }
}

/// Splits `[a, b], [c, d]` into the bracket contents, rejecting anything but
/// commas and whitespace between groups.
fn bracket_groups(text: &str) -> Result<Vec<&str>, ProtocolError> {
    let mut groups = Vec::new();
    let mut rest = text.trim();
    loop {
        let Some(body) = rest.strip_prefix('[') else {
            return Err(malformed(text, "expected `[`"));
        };
        let Some(close) = body.find(']') else {
            return Err(malformed(text, "unclosed `[`"));
        };
        let inner = &body[..close];
        if inner.contains('[') {
            return Err(malformed(text, "nested brackets"));
        }
        groups.push(inner);
        rest = body[close + 1..].trim_start();
        if rest.is_empty() {
            return Ok(groups);
        }
        rest = rest
            .strip_prefix(',')
            .ok_or_else(|| malformed(text, "expected `,` between groups"))?
            .trim_start();
    }
}

fn group_numbers(literal: &str, inner: &str) -> Result<Vec<f64>, ProtocolError> {
    inner
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(malformed(literal, format!("not a number: {tok:?}"))),
            }
        })
        .collect()
}

/// Parses `[a, b]` in seconds. Reversed bounds are swapped; the flag reports
/// whether that happened.
pub(crate) fn interval_literal(text: &str) -> Result<(TemporalInterval, bool), ProtocolError> {
    let groups = bracket_groups(text)?;
    if groups.len() != 1 {
        return Err(malformed(text, "expected a single `[start, end]` pair"));
    }
    let nums = group_numbers(text, groups[0])?;
    let [a, b] = nums[..] else {
        return Err(malformed(text, format!("expected 2 numbers, found {}", nums.len())));
    };
    let swapped = a > b;
    let (lo, hi) = if swapped { (b, a) } else { (a, b) };
    let interval = TemporalInterval::new(lo, hi).map_err(|e| malformed(text, e.to_string()))?;
    Ok((interval, swapped))
}

pub fn parse_interval_literal(text: &str) -> Result<TemporalInterval, ProtocolError> {
    interval_literal(text).map(|(i, _)| i)
}

/// A box literal is either a single box or a run of per-frame boxes.
#[derive(Debug, Clone, PartialEq)]
pub enum BoxLiteral {
    Single(BoundingBox),
    Sequence(BoxSequence),
}

fn box_literal(text: &str) -> Result<(BoxLiteral, bool), ProtocolError> {
    let groups = bracket_groups(text)?;
    let mut swapped = false;
    let mut boxes = Vec::with_capacity(groups.len());
    for g in &groups {
        let nums = group_numbers(text, g)?;
        let [mut x1, mut y1, mut x2, mut y2] = nums[..] else {
            return Err(malformed(text, format!("expected 4 numbers per box, found {}", nums.len())));
        };
        if x1 > x2 {
            std::mem::swap(&mut x1, &mut x2);
            swapped = true;
        }
        if y1 > y2 {
            std::mem::swap(&mut y1, &mut y2);
            swapped = true;
        }
        boxes.push(BoundingBox::new(x1, y1, x2, y2).map_err(|e: GeometryError| malformed(text, e.to_string()))?);
    }
    let lit = if boxes.len() == 1 {
        BoxLiteral::Single(boxes[0])
    } else {
        BoxLiteral::Sequence(BoxSequence::new(boxes).map_err(|e| malformed(text, e.to_string()))?)
    };
    Ok((lit, swapped))
}

pub fn parse_box_literal(text: &str) -> Result<BoxLiteral, ProtocolError> {
    box_literal(text).map(|(b, _)| b)
}

/// Parses a clue literal for the expected kind; the flag reports swapped
/// bounds.
pub(crate) fn parse_clue(text: &str, kind: ClueKind) -> Result<(Clue, bool), ProtocolError> {
    match kind {
        ClueKind::Temporal => interval_literal(text).map(|(i, s)| (Clue::Temporal(i), s)),
        ClueKind::Spatial => match box_literal(text)? {
            (BoxLiteral::Single(b), s) => Ok((Clue::Spatial(b), s)),
            (BoxLiteral::Sequence(_), _) => Err(malformed(text, "expected a single box")),
        },
        ClueKind::BoxSequence => match box_literal(text)? {
            (BoxLiteral::Single(b), s) => Ok((Clue::Track(BoxSequence::new(vec![b]).unwrap()), s)),
            (BoxLiteral::Sequence(seq), s) => Ok((Clue::Track(seq), s)),
        },
    }
}

/// Shortest round-trip decimal, always with a fractional part or exponent.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

pub fn format_interval(i: &TemporalInterval) -> String {
    format!("[{}, {}]", format_number(i.start()), format_number(i.end()))
}

pub fn format_box(b: &BoundingBox) -> String {
    let [x1, y1, x2, y2] = b.coords().map(format_number);
    format!("[{x1}, {y1}, {x2}, {y2}]")
}

pub fn format_clue(c: &Clue) -> String {
    match c {
        Clue::Temporal(i) => format_interval(i),
        Clue::Spatial(b) => format_box(b),
        Clue::Track(seq) => seq.boxes().iter().map(format_box).collect::<Vec<_>>().join(", "),
    }
}

/// Text pieces that make up an iteration prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub temporal_instruction: String,
    pub spatial_instruction: String,
    pub sequence_instruction: String,
    pub refocus_note: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_text: "You are a careful visual reasoner. Think step by step, locate the \
                          visual evidence you need, then answer."
                .into(),
            temporal_instruction: "Give the time span, in seconds from the start of the video, \
                                   that contains the evidence you need."
                .into(),
            spatial_instruction: "Give the pixel box (origin at the top-left corner) that \
                                  contains the evidence you need."
                .into(),
            sequence_instruction: "Give the target's pixel box in every supplied frame, in \
                                   frame order."
                .into(),
            refocus_note: "The visual input below has been re-sampled to focus on your last clue \
                           while keeping the surrounding context."
                .into(),
        }
    }
}

impl PromptTemplate {
    /// Renders the prompt for round `k` (1-based). `history` must hold the
    /// `k - 1` earlier parsed turns.
    pub fn render(
        &self,
        question: &str,
        schema: &ResponseSchema,
        history: &[ParsedResponse],
        k: usize,
    ) -> Result<String, ProtocolError> {
        if k == 0 {
            return Err(ProtocolError::Precondition("iteration index starts at 1".into()));
        }
        if history.len() != k - 1 {
            return Err(ProtocolError::Precondition(format!(
                "round {k} needs {} prior turns, got {}",
                k - 1,
                history.len()
            )));
        }
        let mut out = String::new();
        let _ = writeln!(out, "[round {k}]");
        let _ = writeln!(out, "{}", self.system_text);
        let _ = writeln!(out, "\nQuestion: {question}");
        if !history.is_empty() {
            out.push_str("\nYour earlier rounds:\n");
            for (i, turn) in history.iter().enumerate() {
                let _ = writeln!(out, "Round {} think: {}", i + 1, turn.think);
                let clue = turn.clue.as_ref().map(format_clue).unwrap_or_else(|| "none".into());
                let _ = writeln!(out, "Round {} clue: {clue}", i + 1);
            }
            let _ = writeln!(out, "{}", self.refocus_note);
        }
        if let Some(kind) = schema.clue_kind {
            let instruction = match kind {
                ClueKind::Temporal => &self.temporal_instruction,
                ClueKind::Spatial => &self.spatial_instruction,
                ClueKind::BoxSequence => &self.sequence_instruction,
            };
            let _ = writeln!(out, "\n{instruction}");
        }
        out.push('\n');
        out.push_str(&schema.grammar());
        Ok(out)
    }
}

pub fn render_iteration_prompt(
    question: &str,
    schema: &ResponseSchema,
    history: &[ParsedResponse],
    k: usize,
) -> Result<String, ProtocolError> {
    PromptTemplate::default().render(question, schema, history, k)
}
