//! Deterministic inputs shared by the benchmarks.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refocus_core::dataset::Record;
use refocus_core::metrics::GroundedRecord;
use refocus_core::protocol::ParsedResponse;
use refocus_core::spacetime::{BoundingBox, Clue, Ratio, TemporalInterval};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn intervals(n: usize, seed: u64) -> Vec<TemporalInterval> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = r.random_range(0.0..600.0);
            TemporalInterval::new(s, s + r.random_range(0.5..60.0)).unwrap()
        })
        .collect()
}

pub fn boxes(n: usize, seed: u64) -> Vec<BoundingBox> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..1600.0), r.random_range(0.0..900.0));
            BoundingBox::new(x, y, x + r.random_range(1.0..320.0), y + r.random_range(1.0..180.0)).unwrap()
        })
        .collect()
}

/// Canonical temporal responses with a short think and a letter answer.
pub fn responses(n: usize, seed: u64) -> Vec<String> {
    intervals(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, clue)| {
            ParsedResponse {
                think: format!("the event in step {i} happens after the person stands up"),
                clue: Some(Clue::Temporal(clue)),
                answer: Some(["A", "B", "C", "D"][i % 4].to_string()),
                format_ok: true,
                repairs: Vec::new(),
            }
            .to_canonical()
        })
        .collect()
}

pub fn grounded_records(n: usize, seed: u64) -> Vec<GroundedRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| GroundedRecord {
            qa_correct: r.random_bool(0.6),
            iop: Ratio::new(r.random_range(0.0..=1.0)),
            iou: Ratio::new(r.random_range(0.0..=1.0)),
        })
        .collect()
}

/// A 100 s multiple-choice video record.
pub fn video_record(id: &str) -> Record {
    serde_json::from_value(serde_json::json!({
        "id": id,
        "source": "bench",
        "media": {"kind": "video", "path": format!("{id}.mp4"), "duration": 100.0, "width": 640, "height": 480},
        "task": "video_qa",
        "question": "What happens after the person stands up?",
        "options": ["A. they sit again", "B. they open the door"],
        "think": "t",
        "answer": "B",
    }))
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(intervals(16, 3), intervals(16, 3));
        assert_eq!(boxes(16, 3), boxes(16, 3));
        assert_eq!(responses(4, 1), responses(4, 1));
    }
}
