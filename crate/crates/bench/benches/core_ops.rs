use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use refocus_bench::{boxes, grounded_records, intervals, responses, video_record};
use refocus_core::engine::{run_episode, ItpConfig};
use refocus_core::gateway::{InlineProber, MockModel, MockScript, SyntheticFrames};
use refocus_core::metrics::{grounded_qa_metrics, MetricOptions};
use refocus_core::protocol::{parse_response, ResponseSchema};
use refocus_core::sampling::{differential_timestamps, resolve_video_budget, smart_resize, Dims, SamplingConfig};
use refocus_core::spacetime::{box_iou, interval_iou, ClueKind, TemporalInterval};

fn geometry(c: &mut Criterion) {
    let a = intervals(1024, 1);
    let b = intervals(1024, 2);
    c.bench_function("interval_iou x1024", |bench| {
        bench.iter(|| a.iter().zip(&b).map(|(x, y)| interval_iou(x, y).get()).sum::<f64>())
    });
    let p = boxes(1024, 3);
    let q = boxes(1024, 4);
    c.bench_function("box_iou x1024", |bench| {
        bench.iter(|| p.iter().zip(&q).map(|(x, y)| box_iou(x, y).get()).sum::<f64>())
    });
}

fn protocol(c: &mut Criterion) {
    let schema = ResponseSchema::new(true, Some(ClueKind::Temporal), true, None).unwrap();
    let raw = responses(256, 5);
    c.bench_function("parse_response x256", |bench| {
        bench.iter(|| raw.iter().filter(|r| parse_response(r, &schema).is_ok()).count())
    });
}

fn sampling(c: &mut Criterion) {
    let cfg = SamplingConfig::default();
    let clue = [TemporalInterval::new(31.0, 47.5).unwrap()];
    c.bench_function("resolve_video_budget 1h 1080p", |bench| {
        bench.iter(|| resolve_video_budget(black_box(3600.0), Dims::new(1920, 1080), &cfg).unwrap())
    });
    c.bench_function("differential_timestamps n=2048", |bench| {
        bench.iter(|| differential_timestamps(black_box(1200.0), 2048, &clue, Dims::new(448, 252), &cfg).unwrap())
    });
    let bounds = cfg.frame_bounds();
    c.bench_function("smart_resize", |bench| bench.iter(|| smart_resize(black_box(3840), black_box(2160), &bounds).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let recs = grounded_records(10_000, 6);
    c.bench_function("grounded_qa_metrics 10k", |bench| {
        bench.iter(|| grounded_qa_metrics(&recs, MetricOptions::default()).unwrap())
    });
}

fn episode(c: &mut Criterion) {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let rec = video_record("bench-1");
    let cfg = ItpConfig::default();
    let reply = "<think>the door opens</think><clue>[31.0, 47.5]</clue><answer>B</answer>";
    c.bench_function("run_episode K=3 mock", |bench| {
        bench.iter_batched(
            || MockModel::new(MockScript::constant(reply)),
            |model| rt.block_on(run_episode(&rec, &cfg, &model, &SyntheticFrames, &InlineProber)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, geometry, protocol, sampling, metrics, episode);
criterion_main!(benches);
