//! Temporal intervals, pixel boxes and box sequences, plus the overlap
//! measures shared by rewards and metrics.
//!
//! Coordinates are continuous reals. Zero-measure inputs are handled by a
//! membership rule instead of producing `0/0`, so every overlap measure is
//! total over valid inputs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("reversed bounds: {lo} > {hi}")]
    Reversed { lo: f64, hi: f64 },
    #[error("empty box sequence")]
    EmptySequence,
    #[error("sequence length mismatch: pred {pred}, gt {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("region lies entirely outside the media bounds")]
    EmptyAfterClip,
    #[error("media extent must be positive, got {0}")]
    NonPositiveExtent(f64),
}

/// Dimensionless overlap value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ratio(f64);

impl Ratio {
    pub const ZERO: Ratio = Ratio(0.0);
    pub const ONE: Ratio = Ratio(1.0);

    /// Clamps into `[0, 1]`; NaN maps to zero.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            Ratio(0.0)
        } else {
            Ratio(value.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<Ratio> for f64 {
    fn from(r: Ratio) -> f64 {
        r.0
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A span of media time in seconds.
///
/// Construction only requires finite, ordered endpoints. Negative or
/// past-the-end values are representable so that model output can be
/// clipped against the media; dataset validation rejects them for ground
/// truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct TemporalInterval {
    start: f64,
    end: f64,
}

impl TemporalInterval {
    pub fn new(start: f64, end: f64) -> Result<Self, GeometryError> {
        if !start.is_finite() || !end.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if start > end {
            return Err(GeometryError::Reversed { lo: start, hi: end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    fn intersection_length(&self, other: &Self) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

impl TryFrom<[f64; 2]> for TemporalInterval {
    type Error = GeometryError;

    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1])
    }
}

impl From<TemporalInterval> for [f64; 2] {
    fn from(i: TemporalInterval) -> Self {
        [i.start, i.end]
    }
}

/// Axis-aligned pixel box, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 > x2 {
            return Err(GeometryError::Reversed { lo: x1, hi: x2 });
        }
        if y1 > y2 {
            return Err(GeometryError::Reversed { lo: y1, hi: y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// One box per sampled frame, in frame order. Never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BoundingBox>", into = "Vec<BoundingBox>")]
pub struct BoxSequence(Vec<BoundingBox>);

impl BoxSequence {
    pub fn new(boxes: Vec<BoundingBox>) -> Result<Self, GeometryError> {
        if boxes.is_empty() {
            return Err(GeometryError::EmptySequence);
        }
        Ok(Self(boxes))
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<BoundingBox>> for BoxSequence {
    type Error = GeometryError;

    fn try_from(v: Vec<BoundingBox>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BoxSequence> for Vec<BoundingBox> {
    fn from(s: BoxSequence) -> Self {
        s.0
    }
}

/// Geometry family of a clue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueKind {
    Temporal,
    Spatial,
    BoxSequence,
}

impl fmt::Display for ClueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClueKind::Temporal => "temporal",
            ClueKind::Spatial => "spatial",
            ClueKind::BoxSequence => "box_sequence",
        })
    }
}

/// A spatio-temporal region of interest, either model-emitted or annotated.
///
/// Serialized as a bare JSON array whose shape selects the variant:
/// `[s, e]`, `[x1, y1, x2, y2]` or `[[x1, y1, x2, y2], ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Clue {
    Temporal(TemporalInterval),
    Spatial(BoundingBox),
    Track(BoxSequence),
}

impl Clue {
    pub fn kind(&self) -> ClueKind {
        match self {
            Clue::Temporal(_) => ClueKind::Temporal,
            Clue::Spatial(_) => ClueKind::Spatial,
            Clue::Track(_) => ClueKind::BoxSequence,
        }
    }
}

/// Intersection over union of two intervals.
///
/// Two zero-length intervals score 1 when they are the same instant and 0
/// otherwise.
pub fn interval_iou(a: &TemporalInterval, b: &TemporalInterval) -> Ratio {
    let inter = a.intersection_length(b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a.start == b.start { Ratio::ONE } else { Ratio::ZERO };
    }
    Ratio::new(inter / union)
}

/// Intersection over the prediction's length. A point prediction scores 1
/// when it lies inside `gt` (endpoints included).
pub fn interval_iop(pred: &TemporalInterval, gt: &TemporalInterval) -> Ratio {
    let len = pred.length();
    if len <= 0.0 {
        return if gt.contains(pred.start) { Ratio::ONE } else { Ratio::ZERO };
    }
    Ratio::new(pred.intersection_length(gt) / len)
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Ratio {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { Ratio::ONE } else { Ratio::ZERO };
    }
    Ratio::new(inter / union)
}

/// Per-frame box IoU values for two sequences of equal length.
pub fn track_frame_ious(pred: &BoxSequence, gt: &BoxSequence) -> Result<Vec<Ratio>, GeometryError> {
    if pred.len() != gt.len() {
        return Err(GeometryError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(pred
        .boxes()
        .iter()
        .zip(gt.boxes())
        .map(|(p, g)| box_iou(p, g))
        .collect())
}

/// Mean per-frame IoU of two box sequences.
pub fn track_mean_iou(pred: &BoxSequence, gt: &BoxSequence) -> Result<Ratio, GeometryError> {
    let ious = track_frame_ious(pred, gt)?;
    let sum: f64 = ious.iter().map(|r| r.get()).sum();
    Ok(Ratio::new(sum / ious.len() as f64))
}

/// Clamps both endpoints into `[0, duration]`.
pub fn clip_interval(i: &TemporalInterval, duration: f64) -> Result<TemporalInterval, GeometryError> {
    if !duration.is_finite() || duration <= 0.0 {
        return Err(GeometryError::NonPositiveExtent(duration));
    }
    let start = i.start.clamp(0.0, duration);
    let end = i.end.clamp(0.0, duration);
    let outside = i.end < 0.0 || i.start > duration;
    if end - start <= 0.0 && outside {
        return Err(GeometryError::EmptyAfterClip);
    }
    TemporalInterval::new(start, end)
}

/// Clamps a box into `[0, width] x [0, height]`.
pub fn clamp_box(b: &BoundingBox, width: f64, height: f64) -> Result<BoundingBox, GeometryError> {
    for extent in [width, height] {
        if !extent.is_finite() || extent <= 0.0 {
            return Err(GeometryError::NonPositiveExtent(extent));
        }
    }
    let x1 = b.x1.clamp(0.0, width);
    let x2 = b.x2.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let y2 = b.y2.clamp(0.0, height);
    let outside = b.x2 < 0.0 || b.x1 > width || b.y2 < 0.0 || b.y1 > height;
    let clamped = BoundingBox::new(x1, y1, x2, y2)?;
    if clamped.area() <= 0.0 && outside {
        return Err(GeometryError::EmptyAfterClip);
    }
    Ok(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: f64, b: f64) -> TemporalInterval {
        TemporalInterval::new(a, b).unwrap()
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn interval_iou_examples() {
        assert_eq!(interval_iou(&iv(6.0, 11.9), &iv(6.0, 11.9)).get(), 1.0);
        assert_eq!(interval_iou(&iv(0.0, 5.0), &iv(10.0, 20.0)).get(), 0.0);
        assert!((interval_iou(&iv(0.0, 10.0), &iv(5.0, 15.0)).get() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_intervals() {
        assert_eq!(interval_iou(&iv(3.0, 3.0), &iv(3.0, 3.0)).get(), 1.0);
        assert_eq!(interval_iou(&iv(3.0, 3.0), &iv(4.0, 4.0)).get(), 0.0);
        assert_eq!(interval_iou(&iv(3.0, 3.0), &iv(0.0, 4.0)).get(), 0.0);
        assert_eq!(interval_iop(&iv(3.0, 3.0), &iv(0.0, 4.0)).get(), 1.0);
        assert_eq!(interval_iop(&iv(4.0, 4.0), &iv(0.0, 4.0)).get(), 1.0);
        assert_eq!(interval_iop(&iv(5.0, 5.0), &iv(0.0, 4.0)).get(), 0.0);
    }

    #[test]
    fn interval_iop_examples() {
        assert_eq!(interval_iop(&iv(2.0, 4.0), &iv(0.0, 10.0)).get(), 1.0);
        assert_eq!(interval_iop(&iv(5.0, 15.0), &iv(0.0, 10.0)).get(), 0.5);
        assert_eq!(interval_iop(&iv(20.0, 30.0), &iv(0.0, 10.0)).get(), 0.0);
    }

    #[test]
    fn box_iou_examples() {
        let b = bx(334.72, 298.08, 522.88, 450.24);
        assert_eq!(box_iou(&b, &b).get(), 1.0);
        assert_eq!(box_iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(20.0, 20.0, 30.0, 30.0)).get(), 0.0);
        let v = box_iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(5.0, 5.0, 15.0, 15.0)).get();
        assert!((v - 25.0 / 175.0).abs() < 1e-6);
        assert!((v - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn track_mean_iou_examples() {
        let seq = BoxSequence::new((0..8).map(|i| bx(i as f64, 0.0, i as f64 + 5.0, 5.0)).collect()).unwrap();
        assert_eq!(track_mean_iou(&seq, &seq).unwrap().get(), 1.0);

        let pred = BoxSequence::new(vec![bx(0.0, 0.0, 1.0, 1.0), bx(0.0, 0.0, 1.0, 1.0)]).unwrap();
        let gt = BoxSequence::new(vec![bx(0.0, 0.0, 1.0, 1.0), bx(5.0, 5.0, 6.0, 6.0)]).unwrap();
        assert_eq!(track_mean_iou(&pred, &gt).unwrap().get(), 0.5);

        let short = BoxSequence::new(seq.boxes()[..7].to_vec()).unwrap();
        assert_eq!(
            track_mean_iou(&short, &seq),
            Err(GeometryError::LengthMismatch { pred: 7, gt: 8 })
        );
    }

    #[test]
    fn clip_interval_examples() {
        assert_eq!(clip_interval(&iv(-2.0, 5.0), 10.0).unwrap(), iv(0.0, 5.0));
        assert_eq!(clip_interval(&iv(6.0, 11.9), 11.0).unwrap(), iv(6.0, 11.0));
        assert_eq!(clip_interval(&iv(12.0, 15.0), 10.0), Err(GeometryError::EmptyAfterClip));
        // touching the boundary is not "fully outside"
        assert_eq!(clip_interval(&iv(10.0, 15.0), 10.0).unwrap(), iv(10.0, 10.0));
    }

    #[test]
    fn clamp_box_examples() {
        assert_eq!(clamp_box(&bx(-5.0, -5.0, 10.0, 10.0), 640.0, 480.0).unwrap(), bx(0.0, 0.0, 10.0, 10.0));
        assert_eq!(
            clamp_box(&bx(600.0, 400.0, 700.0, 500.0), 640.0, 480.0).unwrap(),
            bx(600.0, 400.0, 640.0, 480.0)
        );
        assert_eq!(
            clamp_box(&bx(700.0, 500.0, 800.0, 600.0), 640.0, 480.0),
            Err(GeometryError::EmptyAfterClip)
        );
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(TemporalInterval::new(2.0, 1.0), Err(GeometryError::Reversed { .. })));
        assert_eq!(TemporalInterval::new(f64::NAN, 1.0), Err(GeometryError::NonFinite));
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 4.0).is_err());
        assert_eq!(BoxSequence::new(vec![]), Err(GeometryError::EmptySequence));
    }

    #[test]
    fn serde_shapes() {
        let i: TemporalInterval = serde_json::from_str("[6.0, 11.9]").unwrap();
        assert_eq!(i, iv(6.0, 11.9));
        assert!(serde_json::from_str::<TemporalInterval>("[11.9, 6.0]").is_err());
        assert_eq!(serde_json::to_string(&bx(1.0, 2.0, 3.0, 4.5)).unwrap(), "[1.0,2.0,3.0,4.5]");
    }
}
