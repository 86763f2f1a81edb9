use std::path::{Path, PathBuf};

use refocus_core::metrics::{
    grounded_qa_metrics, mcq_accuracy, temporal_grounding_metrics, tracking_metrics, write_report, GroundedRecord,
    MetricOptions, MetricReport,
};
use refocus_core::spacetime::{Ratio, TemporalInterval};

fn fixture_report() -> MetricReport {
    let opts = MetricOptions::default();
    let ti = |a: f64, b: f64| TemporalInterval::new(a, b).unwrap();
    let mut report = MetricReport::new("main-text", "fixture-model", 3);

    let pairs = [(ti(0.0, 10.0), ti(0.0, 10.0)), (ti(0.0, 4.0), ti(0.0, 10.0)), (ti(0.0, 5.0), ti(10.0, 20.0))];
    report.add_temporal("temporal_clue", &temporal_grounding_metrics(&pairs, opts).unwrap());

    let g = |iop: f64, iou: f64, ok: bool| GroundedRecord { qa_correct: ok, iop: Ratio::new(iop), iou: Ratio::new(iou) };
    let grounded = [g(0.6, 0.5, true), g(0.6, 0.25, false), g(0.3, 0.25, true), g(0.0, 0.0, false)];
    report.add_grounded("grounded_qa", &grounded_qa_metrics(&grounded, opts).unwrap());

    let track = tracking_metrics(&[vec![Ratio::new(1.0), Ratio::new(0.0)]], opts).unwrap();
    report.add_tracking("tracking", &track);

    let acc = mcq_accuracy(&["A", "B", "C", "A"], &["A", "B", "C", "D"]).unwrap();
    report.insert("video_qa/accuracy", acc.get(), 4);
    report
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn report_files_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_report(&fixture_report(), &dir.path().join("report.json")).unwrap();
    for path in written {
        let name = format!("golden_{}", path.file_name().unwrap().to_string_lossy());
        let got = std::fs::read_to_string(&path).unwrap();
        if std::env::var_os("REFOCUS_BLESS").is_some() {
            std::fs::write(golden(&name), &got).unwrap();
        }
        let want = std::fs::read_to_string(golden(&name)).unwrap();
        assert_eq!(got, want, "{name} drifted from its golden copy");
    }
}

#[test]
fn repeated_writes_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    write_report(&fixture_report(), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    write_report(&fixture_report(), &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn golden_report_parses_back() {
    let text = std::fs::read_to_string(golden("golden_report.json")).unwrap();
    let back: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, fixture_report());
    assert_eq!(back.metrics["grounded_qa/mIoP"].value, 0.375);
    assert_eq!(back.metrics["tracking/AO"].value, 0.5);
    assert_eq!(back.metrics["video_qa/accuracy"].value, 0.75);
    assert!((back.metrics["temporal_clue/mIoU"].value - 0.4667).abs() < 5e-5);
}

#[test]
fn zero_count_report_is_not_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = MetricReport::new("main-text", "m", 1);
    report.insert("video_qa/accuracy", 0.0, 0);
    assert!(write_report(&report, &dir.path().join("report.json")).is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}
