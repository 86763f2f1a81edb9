//! Verifiable rewards for sampled completions and group-relative
//! advantages.
//!
//! A completion's reward is `λ_clue·r_clue + λ_ans·r_ans + λ_fmt·r_fmt`.
//! Terms whose ground truth is missing from the record are left out.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Record;
use crate::protocol::{extract, validate_format, ResponseSchema};
use crate::spacetime::{box_iou, interval_iou, track_mean_iou, BoundingBox, Clue, GeometryError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("ground-truth answer is empty")]
    EmptyGroundTruth,
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda_clue: f64,
    pub lambda_ans: f64,
    pub lambda_fmt: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_clue: 1.0,
            lambda_ans: 1.0,
            lambda_fmt: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn new(lambda_clue: f64, lambda_ans: f64, lambda_fmt: f64) -> Result<Self, RewardError> {
        let w = Self {
            lambda_clue,
            lambda_ans,
            lambda_fmt,
        };
        for v in [lambda_clue, lambda_ans, lambda_fmt] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RewardError::InvalidWeights(format!("{v} is not a finite non-negative weight")));
            }
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    /// Compare leading option letters.
    Mcq,
    /// Case-folded, whitespace-normalized equality.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFlag {
    UnparseableAnswer,
    KindMismatch,
    MissingClue,
    LengthMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<RewardFlag>,
}

impl Scored {
    fn ok(value: f64) -> Self {
        Self { value, flag: None }
    }

    fn flagged(flag: RewardFlag) -> Self {
        Self { value: 0.0, flag: Some(flag) }
    }
}

pub fn format_reward(raw: &str, schema: &ResponseSchema) -> f64 {
    if validate_format(raw, schema) {
        1.0
    } else {
        0.0
    }
}

static OPTION_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-E])\b").unwrap());

/// First standalone `A`–`E` token.
pub fn option_letter(text: &str) -> Option<char> {
    OPTION_LETTER
        .captures(text.trim())
        .and_then(|c| c[1].chars().next())
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn answer_reward(pred: &str, gt: &str, kind: AnswerKind) -> Result<Scored, RewardError> {
    if gt.trim().is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    Ok(match kind {
        AnswerKind::Mcq => {
            let Some(p) = option_letter(pred) else {
                return Ok(Scored::flagged(RewardFlag::UnparseableAnswer));
            };
            match option_letter(gt) {
                Some(g) => Scored::ok(if p == g { 1.0 } else { 0.0 }),
                None => Scored::ok(if normalize(pred) == normalize(gt) { 1.0 } else { 0.0 }),
            }
        }
        AnswerKind::Exact => Scored::ok(if normalize(pred) == normalize(gt) { 1.0 } else { 0.0 }),
    })
}

/// How predicted and annotated clues are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueMetric {
    #[default]
    Iou,
    /// `max(0, 1 - d)` where `d` is the mean absolute endpoint error divided
    /// by the extent of the hull of both regions, per axis.
    L1,
}

pub fn clue_reward(pred: Option<&Clue>, gt: &Clue) -> Scored {
    clue_reward_with(pred, gt, ClueMetric::Iou)
}

pub fn clue_reward_with(pred: Option<&Clue>, gt: &Clue, metric: ClueMetric) -> Scored {
    let Some(pred) = pred else {
        return Scored::flagged(RewardFlag::MissingClue);
    };
    match (metric, pred, gt) {
        (ClueMetric::Iou, Clue::Temporal(p), Clue::Temporal(g)) => Scored::ok(interval_iou(p, g).get()),
        (ClueMetric::Iou, Clue::Spatial(p), Clue::Spatial(g)) => Scored::ok(box_iou(p, g).get()),
        (ClueMetric::Iou, Clue::Track(p), Clue::Track(g)) => match track_mean_iou(p, g) {
            Ok(r) => Scored::ok(r.get()),
            Err(GeometryError::LengthMismatch { .. }) => Scored::flagged(RewardFlag::LengthMismatch),
            Err(_) => Scored::flagged(RewardFlag::KindMismatch),
        },
        (ClueMetric::L1, Clue::Temporal(p), Clue::Temporal(g)) => {
            let d = hull_l1(&[(p.start(), g.start()), (p.end(), g.end())]);
            Scored::ok((1.0 - d).max(0.0))
        }
        (ClueMetric::L1, Clue::Spatial(p), Clue::Spatial(g)) => Scored::ok(box_l1(p, g)),
        (ClueMetric::L1, Clue::Track(p), Clue::Track(g)) => {
            if p.len() != g.len() {
                return Scored::flagged(RewardFlag::LengthMismatch);
            }
            let sum: f64 = p.boxes().iter().zip(g.boxes()).map(|(a, b)| box_l1(a, b)).sum();
            Scored::ok(sum / p.len() as f64)
        }
        _ => Scored::flagged(RewardFlag::KindMismatch),
    }
}

/// Mean absolute difference over pairs of endpoints on one axis, normalized
/// by the extent covered by all endpoints.
fn hull_l1(pairs: &[(f64, f64)]) -> f64 {
    let lo = pairs.iter().flat_map(|&(a, b)| [a, b]).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().flat_map(|&(a, b)| [a, b]).fold(f64::NEG_INFINITY, f64::max);
    let extent = hi - lo;
    if extent <= 0.0 {
        return 0.0;
    }
    let err: f64 = pairs.iter().map(|(a, b)| (a - b).abs()).sum();
    (err / (pairs.len() as f64 * extent)).min(1.0)
}

fn box_l1(p: &BoundingBox, g: &BoundingBox) -> f64 {
    let dx = hull_l1(&[(p.x1(), g.x1()), (p.x2(), g.x2())]);
    let dy = hull_l1(&[(p.y1(), g.y1()), (p.y2(), g.y2())]);
    (1.0 - (dx + dy) / 2.0).max(0.0)
}

/// `λ_clue·r_clue + λ_ans·r_ans + λ_fmt·r_fmt`, evaluated left to right.
pub fn total_reward(r_clue: f64, r_ans: f64, r_fmt: f64, w: &RewardWeights) -> f64 {
    w.lambda_clue * r_clue + w.lambda_ans * r_ans + w.lambda_fmt * r_fmt
}

/// Reward terms for one completion. Absent terms had no annotation to check
/// against and contribute nothing to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_clue: Option<f64>,
    pub r_ans: Option<f64>,
    pub r_fmt: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<RewardFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardOptions {
    pub weights: RewardWeights,
    pub clue_metric: ClueMetric,
}

/// Scores a raw completion against an annotated record, selecting reward
/// terms by which annotations the record carries.
pub fn score_completion(raw: &str, record: &Record, opts: &RewardOptions) -> Result<RewardBreakdown, RewardError> {
    let schema = ResponseSchema::for_task(record.task, record.sequence_len());
    let ex = extract(raw, &schema);
    let mut flags = Vec::new();

    let r_fmt = format_reward(raw, &schema);
    let r_clue = record.clue.as_ref().map(|gt| {
        let s = clue_reward_with(ex.parsed.clue.as_ref(), gt, opts.clue_metric);
        flags.extend(s.flag);
        s.value
    });
    let r_ans = match record.answer.as_deref() {
        Some(gt) => {
            let pred = ex.parsed.answer.as_deref().unwrap_or("");
            let s = answer_reward(pred, gt, record.answer_kind())?;
            flags.extend(s.flag);
            Some(s.value)
        }
        None => None,
    };
    let w = RewardWeights {
        lambda_clue: if r_clue.is_some() { opts.weights.lambda_clue } else { 0.0 },
        lambda_ans: if r_ans.is_some() { opts.weights.lambda_ans } else { 0.0 },
        ..opts.weights
    };
    Ok(RewardBreakdown {
        total: total_reward(r_clue.unwrap_or(0.0), r_ans.unwrap_or(0.0), r_fmt, &w),
        r_clue,
        r_ans,
        r_fmt,
        flags,
    })
}

pub const DEFAULT_ADVANTAGE_EPSILON: f64 = 1e-6;

/// Group-relative advantages `(r_i - mean) / (std + epsilon)` with the
/// population standard deviation. A zero-variance group maps to all zeros.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub epsilon: f64,
}

impl AdvantageGroup {
    pub fn new(rewards: Vec<f64>, epsilon: f64) -> Self {
        let advantages = group_advantages(&rewards, epsilon);
        Self {
            rewards,
            advantages,
            epsilon,
        }
    }
}
