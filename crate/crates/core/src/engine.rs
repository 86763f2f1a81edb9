//! The K-round perception loop for one sample.
//!
//! Round 1 sees the media the way a single-pass query would: uniformly
//! sampled frames or the full image. Every later round re-samples the media
//! around the clue parsed from the previous round: dense frames inside a
//! temporal clue, or the full image plus a zoomed crop for a box.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MediaKind, MediaRef, Record, TaskKind};
use crate::gateway::{ChatModel, ChatRequest, FrameSource, GatewayError, MediaProber};
use crate::protocol::{extract, format_box, Extraction, Field, ParsedResponse, PromptTemplate, ProtocolError, ResponseSchema};
use crate::sampling::{
    crop_region, differential_timestamps, resolve_video_budget, smart_resize, CropPlan, Dims, FramePlan,
    SamplingConfig, SamplingError, DEFAULT_CROP_MARGIN,
};
use crate::spacetime::{clip_interval, Clue, GeometryError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    MediaProbeFailed(GatewayError),
    #[error("media: {0}")]
    Media(#[from] GatewayError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// What to show the model after a round without a usable clue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnMalformed {
    #[default]
    ReusePreviousPlan,
    FallbackUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItpConfig {
    pub iterations: usize,
    pub sampling: SamplingConfig,
    /// Overrides the schema derived from the record's task.
    pub schema: Option<ResponseSchema>,
    pub on_malformed: OnMalformed,
    /// Keep raw model text in the trace.
    pub record_raw: bool,
    /// Stop once a round repeats the previous round's clue.
    pub stop_on_repeat: bool,
    pub crop_margin: f64,
    pub prompt: PromptTemplate,
}

impl Default for ItpConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            sampling: SamplingConfig::default(),
            schema: None,
            on_malformed: OnMalformed::default(),
            record_raw: true,
            stop_on_repeat: false,
            crop_margin: DEFAULT_CROP_MARGIN,
            prompt: PromptTemplate::default(),
        }
    }
}

impl ItpConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.iterations == 0 {
            return Err(EngineError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return Err(EngineError::InvalidConfig("crop_margin must be >= 0".into()));
        }
        self.sampling.validate()?;
        Ok(())
    }

    pub fn schema_for(&self, record: &Record) -> ResponseSchema {
        self.schema
            .unwrap_or_else(|| ResponseSchema::for_task(record.task, record.sequence_len()))
    }
}

/// Visual input for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisualPlan {
    Full { dims: Dims },
    Frames(FramePlan),
    Crop(CropPlan),
}

impl VisualPlan {
    pub fn frames(&self) -> Option<&FramePlan> {
        match self {
            VisualPlan::Frames(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum FallbackReason {
    MissingClue,
    MalformedClue(String),
    /// The clue lies entirely outside the media.
    ClueOutsideMedia,
    /// The clue has zero extent after clipping.
    DegenerateClue,
    /// The clue kind does not fit the media kind.
    WrongKind,
    Planning(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackAction {
    ReusedPreviousPlan,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackEvent {
    /// Round whose response could not be used.
    pub k: usize,
    #[serde(flatten)]
    pub reason: FallbackReason,
    pub action: FallbackAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Current round, 1-based.
    pub k: usize,
    /// Parsed responses of rounds `1..k`.
    pub history: Vec<ParsedResponse>,
    pub plan: VisualPlan,
    /// Round-1 plan, reused by the uniform fallback.
    pub initial_plan: VisualPlan,
    /// Frame count for video rounds.
    pub frame_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub plan: VisualPlan,
    pub image_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    pub parsed: ParsedResponse,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Field>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clue_error: Option<String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub id: String,
    pub task: TaskKind,
    pub iterations: Vec<IterationRecord>,
    pub final_answer: Option<String>,
    pub final_clue: Option<Clue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_events: Vec<FallbackEvent>,
    /// Round at which a model error ended the episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeTrace {
    pub fn new(record: &Record) -> Self {
        Self {
            id: record.id.clone(),
            task: record.task,
            iterations: Vec::new(),
            final_answer: None,
            final_clue: None,
            fallback_events: Vec::new(),
            aborted_at: None,
            converged_at: None,
            error: None,
        }
    }

    /// Trace for an episode that failed before any model call.
    pub fn failed(record: &Record, error: impl ToString) -> Self {
        Self {
            error: Some(error.to_string()),
            ..Self::new(record)
        }
    }

    pub fn is_complete(&self) -> bool {
        self.aborted_at.is_none() && self.error.is_none()
    }
}

fn media_known(m: &MediaRef) -> bool {
    let dims = m.width.is_some_and(|w| w >= 1) && m.height.is_some_and(|h| h >= 1);
    match m.kind {
        MediaKind::Video => dims && m.duration.is_some_and(|d| d > 0.0 && d.is_finite()),
        MediaKind::Image => dims,
    }
}

/// Fills in duration and dimensions, probing only when the record lacks
/// them.
pub async fn resolve_media(media: &MediaRef, prober: &dyn MediaProber) -> Result<MediaRef, EngineError> {
    if media_known(media) {
        return Ok(media.clone());
    }
    let probed = prober
        .probe(media)
        .await
        .map_err(EngineError::MediaProbeFailed)?
        .or(media.inline_probe());
    let resolved = MediaRef {
        duration: probed.duration,
        width: probed.width,
        height: probed.height,
        ..media.clone()
    };
    if !media_known(&resolved) {
        return Err(EngineError::MediaProbeFailed(GatewayError::MediaProbeFailed {
            path: media.path.clone(),
            reason: "duration or dimensions unknown".into(),
        }));
    }
    Ok(resolved)
}

fn media_dims(media: &MediaRef) -> Dims {
    Dims::new(media.width.unwrap_or(1), media.height.unwrap_or(1))
}

/// Round-1 state: uniform frames for video, the full image otherwise.
pub fn initial_state(
    record: &Record,
    media: &MediaRef,
    schema: &ResponseSchema,
    cfg: &ItpConfig,
) -> Result<EpisodeState, EngineError> {
    let (plan, frame_count) = match media.kind {
        MediaKind::Video => {
            let duration = media.duration.unwrap_or_default();
            let (mut n, dims) = resolve_video_budget(duration, media_dims(media), &cfg.sampling)?;
            if record.task == TaskKind::Tracking {
                n = schema.sequence_len.unwrap_or(n);
            }
            (VisualPlan::Frames(FramePlan::uniform(duration, n, dims)), n)
        }
        MediaKind::Image => {
            let dims = smart_resize(
                media.width.unwrap_or(1),
                media.height.unwrap_or(1),
                &cfg.sampling.image_bounds(),
            )?;
            (VisualPlan::Full { dims }, 0)
        }
    };
    Ok(EpisodeState {
        k: 1,
        history: Vec::new(),
        initial_plan: plan.clone(),
        plan,
        frame_count,
    })
}

/// Renders the prompt and materializes the images for the current round.
pub async fn build_iteration_input(
    state: &EpisodeState,
    record: &Record,
    media: &MediaRef,
    schema: &ResponseSchema,
    cfg: &ItpConfig,
    frames: &dyn FrameSource,
) -> Result<ChatRequest, EngineError> {
    let prompt = cfg.prompt.render(&record.question_text(), schema, &state.history, state.k)?;
    let images = match &state.plan {
        VisualPlan::Frames(p) => frames.extract_frames(media, &p.timestamps, p.per_frame_dims).await?,
        VisualPlan::Full { dims } => vec![frames.render_image(media, None, *dims).await?],
        VisualPlan::Crop(c) => {
            let mut full = frames.render_image(media, None, c.full_image_dims).await?;
            full.caption = Some("Full image:".into());
            let mut crop = frames.render_image(media, Some(&c.crop_region), c.crop_dims).await?;
            crop.caption = Some(format!("Zoomed view of region {}:", format_box(&c.crop_region)));
            vec![full, crop]
        }
    };
    Ok(ChatRequest { prompt, images })
}

fn plan_from_clue(
    clue: &Clue,
    state: &EpisodeState,
    media: &MediaRef,
    cfg: &ItpConfig,
) -> Result<VisualPlan, FallbackReason> {
    let outside = |e: GeometryError| match e {
        GeometryError::EmptyAfterClip => FallbackReason::ClueOutsideMedia,
        other => FallbackReason::Planning(other.to_string()),
    };
    match (media.kind, clue, &state.initial_plan) {
        (MediaKind::Video, Clue::Temporal(interval), VisualPlan::Frames(first)) => {
            let duration = media.duration.unwrap_or_default();
            let clipped = clip_interval(interval, duration).map_err(outside)?;
            let plan = differential_timestamps(duration, state.frame_count, &[clipped], first.per_frame_dims, &cfg.sampling)
                .map_err(|e| FallbackReason::Planning(e.to_string()))?;
            if plan.fallback.is_some() {
                return Err(FallbackReason::DegenerateClue);
            }
            Ok(VisualPlan::Frames(plan))
        }
        (MediaKind::Video, Clue::Track(_), _) => Ok(state.initial_plan.clone()),
        (MediaKind::Image, Clue::Spatial(bbox), _) => {
            match crop_region(media_dims(media), bbox, cfg.crop_margin, &cfg.sampling) {
                Ok(plan) => Ok(VisualPlan::Crop(plan)),
                Err(SamplingError::Geometry(e)) => Err(outside(e)),
                Err(SamplingError::EmptyCrop) => Err(FallbackReason::DegenerateClue),
                Err(e) => Err(FallbackReason::Planning(e.to_string())),
            }
        }
        _ => Err(FallbackReason::WrongKind),
    }
}

/// Moves to round `k + 1`, planning the next visual input from the clue in
/// `ex`. When the clue is unusable the configured fallback applies and the
/// event is returned.
pub fn advance_state(
    state: EpisodeState,
    ex: &Extraction,
    media: &MediaRef,
    cfg: &ItpConfig,
) -> (EpisodeState, Option<FallbackEvent>) {
    let outcome = match (&ex.parsed.clue, &ex.clue_error) {
        (_, Some(err)) => Err(FallbackReason::MalformedClue(err.to_string())),
        (None, None) => Err(FallbackReason::MissingClue),
        (Some(clue), None) => plan_from_clue(clue, &state, media, cfg),
    };
    let k = state.k;
    let (plan, event) = match outcome {
        Ok(plan) => (plan, None),
        Err(reason) => {
            let (plan, action) = match cfg.on_malformed {
                OnMalformed::ReusePreviousPlan => (state.plan.clone(), FallbackAction::ReusedPreviousPlan),
                OnMalformed::FallbackUniform => (state.initial_plan.clone(), FallbackAction::Uniform),
            };
            (plan, Some(FallbackEvent { k, reason, action }))
        }
    };
    let mut history = state.history;
    history.push(ex.parsed.clone());
    (
        EpisodeState {
            k: k + 1,
            history,
            plan,
            initial_plan: state.initial_plan,
            frame_count: state.frame_count,
        },
        event,
    )
}

/// Runs all rounds for one record. Model failures end the episode early and
/// are recorded on the trace; media and planning failures are returned.
pub async fn run_episode(
    record: &Record,
    cfg: &ItpConfig,
    model: &dyn ChatModel,
    frames: &dyn FrameSource,
    prober: &dyn MediaProber,
) -> Result<EpisodeTrace, EngineError> {
    cfg.validate()?;
    let media = resolve_media(&record.media, prober).await?;
    let schema = cfg.schema_for(record);
    let mut state = initial_state(record, &media, &schema, cfg)?;
    let mut trace = EpisodeTrace::new(record);

    for k in 1..=cfg.iterations {
        let req = build_iteration_input(&state, record, &media, &schema, cfg, frames).await?;
        let started = Instant::now();
        let raw = match model.complete(&req).await {
            Ok(raw) => raw,
            Err(e) => {
                tracing::warn!(id = %record.id, k, error = %e, "episode aborted");
                trace.aborted_at = Some(k);
                trace.error = Some(e.to_string());
                break;
            }
        };
        let ex = extract(&raw, &schema);
        let repeated = ex.parsed.clue.is_some() && trace.final_clue == ex.parsed.clue;
        if ex.parsed.clue.is_some() {
            trace.final_clue = ex.parsed.clue.clone();
        }
        trace.iterations.push(IterationRecord {
            k,
            plan: state.plan.clone(),
            image_count: req.images.len(),
            raw: cfg.record_raw.then(|| raw.clone()),
            parsed: ex.parsed.clone(),
            missing: ex.missing.clone(),
            clue_error: ex.clue_error.as_ref().map(ToString::to_string),
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if cfg.stop_on_repeat && repeated {
            trace.converged_at = Some(k);
            break;
        }
        if k < cfg.iterations {
            let (next, event) = advance_state(state, &ex, &media, cfg);
            state = next;
            trace.fallback_events.extend(event);
        }
    }
    if trace.aborted_at.is_none() {
        trace.final_answer = trace.iterations.last().and_then(|it| it.parsed.answer.clone());
    }
    Ok(trace)
}
