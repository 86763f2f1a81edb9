use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use refocus_core::dataset::{corpus_stats, read_jsonl, run_judge, validate_record, write_jsonl, CorpusStats, Record};
use refocus_core::gateway::{CommandProber, MediaProber};
use serde::Deserialize;

use super::{build_model, invalid, load_dataset, write_atomic};
use crate::args::{JudgeArgs, StatsArgs, ValidateArgs};

pub async fn validate(args: ValidateArgs) -> Result<()> {
    if !args.dataset.is_file() {
        anyhow::bail!("dataset {} does not exist", args.dataset.display());
    }
    let prober = args.probe.then(CommandProber::ffprobe);
    let mut checked = 0;
    let mut problems = 0;
    for (i, line) in read_jsonl(&args.dataset)?.into_iter().enumerate() {
        let mut rec = match line {
            Ok(r) => r,
            Err(e) => {
                println!("line {}: {e}", i + 1);
                problems += 1;
                continue;
            }
        };
        if let Some(root) = &args.media_root {
            if Path::new(&rec.media.path).is_relative() {
                rec.media.path = root.join(&rec.media.path).display().to_string();
            }
        }
        let probe = match &prober {
            Some(p) => match p.probe(&rec.media).await {
                Ok(probe) => Some(probe),
                Err(e) => {
                    println!("{}: media probe failed: {e}", rec.id);
                    problems += 1;
                    continue;
                }
            },
            None => None,
        };
        checked += 1;
        for v in validate_record(&rec, probe.as_ref()) {
            println!("{}: {v}", rec.id);
            problems += 1;
        }
    }
    eprintln!("{checked} records checked, {problems} problems");
    if problems > 0 {
        return Err(invalid(format!("{problems} problems in {}", args.dataset.display())));
    }
    Ok(())
}

fn stats_table(stats: &CorpusStats) -> String {
    let mut s = String::new();
    let row = |s: &mut String, name: &str, c: &refocus_core::dataset::AnnotationCounts| {
        let _ = writeln!(
            s,
            "{name:<24} {:>8} {:>9} {:>8} {:>7} {:>8}",
            c.records, c.temporal_clues, c.spatial_clues, c.thinks, c.qa_pairs
        );
    };
    let _ = writeln!(s, "{:<24} {:>8} {:>9} {:>8} {:>7} {:>8}", "source", "records", "temporal", "spatial", "thinks", "qa");
    for (source, c) in &stats.by_source {
        row(&mut s, if source.is_empty() { "(none)" } else { source }, c);
    }
    row(&mut s, "total", &stats.totals);
    s.push('\n');
    for (task, n) in &stats.by_task {
        let _ = writeln!(s, "{:<24} {n:>8}", task.as_str());
    }
    if !stats.duplicate_ids.is_empty() {
        let _ = writeln!(s, "\nduplicate ids: {}", stats.duplicate_ids.join(", "));
    }
    s
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, None)?;
    let stats = corpus_stats(&records);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats_table(&stats));
    }
    Ok(())
}

#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
}

fn load_captions(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: CaptionLine =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.insert(c.id, c.caption);
    }
    Ok(out)
}

pub async fn judge(args: JudgeArgs) -> Result<()> {
    let records: Vec<Record> = load_dataset(&args.dataset, None)?;
    let captions = match &args.captions {
        Some(p) => load_captions(p)?,
        None => HashMap::new(),
    };
    let handle = build_model(&args.model)?;
    let summary = run_judge(
        records,
        |r| captions.get(&r.id).cloned().unwrap_or_default(),
        &handle.model,
        args.concurrency,
    )
    .await;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&args.out.join("kept.jsonl"), &summary.kept)?;
    write_jsonl(&args.out.join("dropped.jsonl"), &summary.dropped)?;
    let mut quarantined = String::new();
    for (rec, reason) in &summary.quarantined {
        let line = serde_json::json!({ "record": rec, "reason": reason });
        let _ = writeln!(quarantined, "{line}");
    }
    write_atomic(&args.out.join("quarantined.jsonl"), &quarantined)?;
    println!(
        "kept {}, dropped {}, quarantined {}",
        summary.kept.len(),
        summary.dropped.len(),
        summary.quarantined.len()
    );
    Ok(())
}
