//! Visual re-sampling: frame budgets, uniform and clue-focused timestamp
//! plans for video, and resize/crop plans for images.
//!
//! Everything here is deterministic planning; decoding pixels is the
//! gateway's job.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spacetime::{clamp_box, BoundingBox, GeometryError, TemporalInterval};

/// One 28x28 patch, the unit all pixel bounds are expressed in.
pub const PATCH_AREA: u64 = 28 * 28;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("aspect ratio {ratio:.1} exceeds limit {limit}")]
    AspectRatioExceeded { ratio: f64, limit: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("crop region has zero area after clamping")]
    EmptyCrop,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("preset file: {0}")]
    PresetFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Share of the frame budget placed inside clue intervals on refinement
    /// rounds.
    pub key_ratio: f64,
    pub per_frame_min_pixels: u64,
    pub per_frame_max_pixels: u64,
    pub image_min_pixels: u64,
    pub image_max_pixels: u64,
    /// Pixel budget for all frames of one request.
    pub total_pixel_budget: u64,
    pub patch_factor: u32,
    pub max_aspect_ratio: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            fps: 2.0,
            min_frames: 64,
            max_frames: 2048,
            key_ratio: 0.5,
            per_frame_min_pixels: 128 * PATCH_AREA,
            per_frame_max_pixels: 768 * PATCH_AREA,
            image_min_pixels: 4 * PATCH_AREA,
            image_max_pixels: 768 * PATCH_AREA,
            total_pixel_budget: 16384 * PATCH_AREA,
            patch_factor: 28,
            max_aspect_ratio: 200.0,
        }
    }
}

/// Built-in preset names.
pub const PRESET_NAMES: [&str; 3] = ["main-text", "train", "appendix-eval"];

impl SamplingConfig {
    /// Built-in presets: `main-text` (64..2048 frames), `train` (4..768)
    /// and `appendix-eval` (4..2048, alias `eval`).
    pub fn preset(name: &str) -> Result<Self, SamplingError> {
        let base = Self::default();
        match name {
            "main-text" | "default" => Ok(base),
            "train" => Ok(Self {
                min_frames: 4,
                max_frames: 768,
                ..base
            }),
            "appendix-eval" | "eval" => Ok(Self {
                min_frames: 4,
                max_frames: 2048,
                ..base
            }),
            other => Err(SamplingError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let bad = |m: &str| Err(SamplingError::InvalidConfig(m.to_string()));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 0 < min_frames <= max_frames");
        }
        if !(0.0..=1.0).contains(&self.key_ratio) {
            return bad("key_ratio must lie in [0, 1]");
        }
        if self.per_frame_min_pixels > self.per_frame_max_pixels {
            return bad("per_frame_min_pixels exceeds per_frame_max_pixels");
        }
        if self.image_min_pixels > self.image_max_pixels {
            return bad("image_min_pixels exceeds image_max_pixels");
        }
        if self.patch_factor == 0 {
            return bad("patch_factor must be >= 1");
        }
        if self.max_aspect_ratio.is_nan() || self.max_aspect_ratio < 1.0 {
            return bad("max_aspect_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn frame_bounds(&self) -> ResizeBounds {
        ResizeBounds {
            min_pixels: self.per_frame_min_pixels,
            max_pixels: self.per_frame_max_pixels,
            factor: self.patch_factor,
            max_aspect_ratio: self.max_aspect_ratio,
        }
    }

    pub fn image_bounds(&self) -> ResizeBounds {
        ResizeBounds {
            min_pixels: self.image_min_pixels,
            max_pixels: self.image_max_pixels,
            factor: self.patch_factor,
            max_aspect_ratio: self.max_aspect_ratio,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    #[serde(default)]
    presets: BTreeMap<String, toml::Table>,
}

/// Loads named presets from a TOML document of the form
///
/// ```toml
/// [presets.long-video]
/// base = "appendix-eval"
/// max_frames = 1024
/// ```
///
/// Each entry starts from its `base` (default `main-text`) and overrides the
/// listed fields. Built-in presets stay available under their own names.
pub fn load_presets(text: &str) -> Result<BTreeMap<String, SamplingConfig>, SamplingError> {
    let file: PresetFile = toml::from_str(text).map_err(|e| SamplingError::PresetFile(e.to_string()))?;
    let mut out = BTreeMap::new();
    for name in PRESET_NAMES {
        out.insert(name.to_string(), SamplingConfig::preset(name)?);
    }
    for (name, mut table) in file.presets {
        let base_name = match table.remove("base") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(SamplingError::PresetFile(format!("{name}: `base` must be a string"))),
            None => "main-text".to_string(),
        };
        let base = match out.get(&base_name) {
            Some(cfg) => cfg.clone(),
            None => SamplingConfig::preset(&base_name)?,
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| SamplingError::PresetFile(e.to_string()))?;
        merged.extend(table);
        let cfg: SamplingConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| SamplingError::PresetFile(format!("{name}: {e}")))?;
        cfg.validate()?;
        out.insert(name, cfg);
    }
    Ok(out)
}

pub fn load_presets_file(path: &Path) -> Result<BTreeMap<String, SamplingConfig>, SamplingError> {
    let text = std::fs::read_to_string(path).map_err(|e| SamplingError::PresetFile(format!("{}: {e}", path.display())))?;
    load_presets(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Pixel bounds for one resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeBounds {
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub factor: u32,
    pub max_aspect_ratio: f64,
}

/// Snaps dimensions to multiples of the patch factor while keeping the
/// aspect ratio and landing the pixel count inside the bounds.
///
/// Rounds to the nearest multiple when already in range, rounds down when
/// shrinking to meet the maximum and rounds up when growing to meet the
/// minimum.
pub fn smart_resize(width: u32, height: u32, bounds: &ResizeBounds) -> Result<Dims, SamplingError> {
    if width == 0 || height == 0 {
        return Err(SamplingError::Precondition("dimensions must be >= 1".into()));
    }
    let (w, h) = (width as f64, height as f64);
    let ratio = w.max(h) / w.min(h);
    if ratio > bounds.max_aspect_ratio {
        return Err(SamplingError::AspectRatioExceeded {
            ratio,
            limit: bounds.max_aspect_ratio,
        });
    }
    let f = bounds.factor as f64;
    let snap = |v: f64, op: fn(f64) -> f64| (op(v / f) * f).max(f);
    let mut w_bar = snap(w, f64::round);
    let mut h_bar = snap(h, f64::round);
    let area = w_bar * h_bar;
    if area > bounds.max_pixels as f64 {
        let beta = (w * h / bounds.max_pixels as f64).sqrt();
        w_bar = snap(w / beta, f64::floor);
        h_bar = snap(h / beta, f64::floor);
    } else if area < bounds.min_pixels as f64 {
        let beta = (bounds.min_pixels as f64 / (w * h)).sqrt();
        w_bar = snap(w * beta, f64::ceil);
        h_bar = snap(h * beta, f64::ceil);
    }
    Ok(Dims::new(w_bar as u32, h_bar as u32))
}

/// Frame count for a video before any pixel-budget reduction:
/// `round(duration * fps)` clamped to `[min_frames, max_frames]`.
pub fn frame_budget(duration: f64, cfg: &SamplingConfig) -> usize {
    let raw = (duration * cfg.fps).round();
    let raw = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    raw.clamp(cfg.min_frames, cfg.max_frames)
}

/// Frame count and per-frame size for a video under the total pixel budget.
///
/// When `count x frame area` exceeds the budget the frame count is reduced
/// first (down to `min_frames`), then per-frame resolution. If even
/// minimum-resolution frames do not fit, the count drops below `min_frames`.
/// The count is also capped so frames can be 1 ms apart.
pub fn resolve_video_budget(
    duration: f64,
    media: Dims,
    cfg: &SamplingConfig,
) -> Result<(usize, Dims), SamplingError> {
    if duration.is_nan() || duration <= 0.0 {
        return Err(SamplingError::Precondition("duration must be positive".into()));
    }
    let total = cfg.total_pixel_budget;
    let mut n = frame_budget(duration, cfg);
    let ms_slots = ((duration * 1000.0).floor() as usize).max(1);
    n = n.min(ms_slots);

    let bounds = cfg.frame_bounds();
    let mut dims = smart_resize(media.width, media.height, &bounds)?;
    if n as u64 * dims.area() > total {
        let fit = (total / dims.area()) as usize;
        n = fit.max(cfg.min_frames.min(n)).min(n);
    }
    if n as u64 * dims.area() > total {
        let cap = total / n as u64;
        let shrunk = ResizeBounds {
            max_pixels: cap.max(bounds.min_pixels),
            min_pixels: bounds.min_pixels.min(cap),
            ..bounds
        };
        dims = smart_resize(media.width, media.height, &shrunk)?;
        if n as u64 * dims.area() > total {
            n = ((total / dims.area()) as usize).max(1);
        }
    }
    Ok((n, dims))
}

/// Bin midpoints `t_i = (i + 0.5) * duration / n`.
pub fn uniform_timestamps(duration: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) * duration / n as f64).collect()
}

fn segment_midpoints(seg: &TemporalInterval, m: usize) -> impl Iterator<Item = f64> + '_ {
    let len = seg.end() - seg.start();
    (0..m).map(move |i| seg.start() + (i as f64 + 0.5) * len / m as f64)
}

/// Largest-remainder apportionment of `total` slots by weight. Ties go to
/// the earlier index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum.is_nan() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Sorted, merged, clipped union of intervals, dropping zero-length pieces.
pub fn merge_intervals(duration: f64, clues: &[TemporalInterval]) -> Vec<TemporalInterval> {
    let mut pieces: Vec<(f64, f64)> = clues
        .iter()
        .map(|c| (c.start().clamp(0.0, duration), c.end().clamp(0.0, duration)))
        .filter(|(s, e)| e > s)
        .collect();
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in pieces {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .map(|(s, e)| TemporalInterval::new(s, e).expect("merged pieces are ordered"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanFallback {
    /// No clue intervals were supplied.
    NoClues,
    /// The merged clue intervals have zero measure.
    DegenerateClue,
}

/// Concrete frame selection for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub timestamps: Vec<f64>,
    pub per_frame_dims: Dims,
    pub inside_clue_mask: Vec<bool>,
    /// Merged clue intervals the dense share was drawn from.
    pub clue_segments: Vec<TemporalInterval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<PlanFallback>,
}

impl FramePlan {
    pub fn uniform(duration: f64, n: usize, dims: Dims) -> Self {
        Self {
            timestamps: uniform_timestamps(duration, n),
            per_frame_dims: dims,
            inside_clue_mask: vec![false; n],
            clue_segments: Vec::new(),
            fallback: None,
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn inside_count(&self) -> usize {
        self.inside_clue_mask.iter().filter(|&&m| m).count()
    }
}

fn ms_key(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// Dense sampling inside the clue intervals, sparse sampling elsewhere.
///
/// `ceil(key_ratio * n)` frames go inside the merged clues, split across
/// clue segments by length; the rest are split across the complementary gaps
/// by length. Within a segment frames sit at bin midpoints. Frames closer
/// than 1 ms to the previous one are dropped. With no usable clue the plan is
/// uniform and carries a fallback flag.
pub fn differential_timestamps(
    duration: f64,
    n: usize,
    clues: &[TemporalInterval],
    dims: Dims,
    cfg: &SamplingConfig,
) -> Result<FramePlan, SamplingError> {
    if n < 2 {
        return Err(SamplingError::Precondition("differential plan needs n >= 2".into()));
    }
    if duration.is_nan() || duration <= 0.0 {
        return Err(SamplingError::Precondition("duration must be positive".into()));
    }
    if clues.is_empty() {
        return Ok(FramePlan {
            fallback: Some(PlanFallback::NoClues),
            ..FramePlan::uniform(duration, n, dims)
        });
    }
    let segments = merge_intervals(duration, clues);
    if segments.is_empty() {
        return Ok(FramePlan {
            fallback: Some(PlanFallback::DegenerateClue),
            ..FramePlan::uniform(duration, n, dims)
        });
    }

    let mut gaps = Vec::new();
    let mut cursor = 0.0;
    for seg in &segments {
        if seg.start() > cursor {
            gaps.push(TemporalInterval::new(cursor, seg.start()).unwrap());
        }
        cursor = seg.end();
    }
    if duration > cursor {
        gaps.push(TemporalInterval::new(cursor, duration).unwrap());
    }

    let mut n_in = ((cfg.key_ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    n_in = n_in.min(n);
    if gaps.is_empty() {
        n_in = n;
    }
    let n_out = n - n_in;

    let mut frames: Vec<(f64, bool)> = Vec::with_capacity(n);
    let seg_counts = apportion(n_in, &segments.iter().map(|s| s.length()).collect::<Vec<_>>());
    for (seg, &m) in segments.iter().zip(&seg_counts) {
        frames.extend(segment_midpoints(seg, m).map(|t| (t, true)));
    }
    let gap_counts = apportion(n_out, &gaps.iter().map(|g| g.length()).collect::<Vec<_>>());
    for (gap, &m) in gaps.iter().zip(&gap_counts) {
        frames.extend(segment_midpoints(gap, m).map(|t| (t, false)));
    }
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    frames.dedup_by(|later, kept| ms_key(later.0) == ms_key(kept.0));

    Ok(FramePlan {
        timestamps: frames.iter().map(|f| f.0).collect(),
        per_frame_dims: dims,
        inside_clue_mask: frames.iter().map(|f| f.1).collect(),
        clue_segments: segments,
        fallback: None,
    })
}

/// Full image plus a zoomed crop around a spatial clue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub full_image_dims: Dims,
    /// Integer pixel region in original image coordinates.
    pub crop_region: BoundingBox,
    pub crop_dims: Dims,
}

pub const DEFAULT_CROP_MARGIN: f64 = 0.10;

/// Pads the box by `margin` of its size on each side, clamps it to the
/// image and snaps it outward to whole pixels.
pub fn crop_region(
    image: Dims,
    bbox: &BoundingBox,
    margin: f64,
    cfg: &SamplingConfig,
) -> Result<CropPlan, SamplingError> {
    let (w, h) = (image.width as f64, image.height as f64);
    let clamped = clamp_box(bbox, w, h)?;
    if clamped.area() <= 0.0 {
        return Err(SamplingError::EmptyCrop);
    }
    let (px, py) = (bbox.width() * margin, bbox.height() * margin);
    let padded = BoundingBox::new(bbox.x1() - px, bbox.y1() - py, bbox.x2() + px, bbox.y2() + py)?;
    let padded = clamp_box(&padded, w, h)?;
    let region = BoundingBox::new(
        padded.x1().floor(),
        padded.y1().floor(),
        padded.x2().ceil().min(w),
        padded.y2().ceil().min(h),
    )?;
    let crop_w = region.width() as u32;
    let crop_h = region.height() as u32;
    Ok(CropPlan {
        full_image_dims: smart_resize(image.width, image.height, &cfg.image_bounds())?,
        crop_region: region,
        crop_dims: smart_resize(crop_w.max(1), crop_h.max(1), &cfg.image_bounds())?,
    })
}
