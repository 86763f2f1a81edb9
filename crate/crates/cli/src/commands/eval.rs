use anyhow::{anyhow, bail, Result};
use refocus_core::dataset::validate_record;
use refocus_core::engine::run_episode;
use refocus_core::eval::{run_eval as run, EvalError, EvalOptions};

use super::{build_frames, build_itp, build_model, build_prober, invalid, load_dataset, metric_options};
use crate::args::{EpisodeArgs, RunEvalArgs};

pub async fn run_eval(args: RunEvalArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, args.media.media_root.as_deref())?;
    let itp = build_itp(&args.itp)?;
    if !args.force {
        let mut bad = 0;
        for rec in &records {
            for v in validate_record(rec, None) {
                eprintln!("{}: {v}", rec.id);
                bad += 1;
            }
        }
        if bad > 0 {
            return Err(invalid(format!("{bad} violations in {}; pass --force to run anyway", args.dataset.display())));
        }
    }
    let handle = build_model(&args.model)?;
    let frames = build_frames(&args.media)?;
    let prober = build_prober(args.media.probe);
    let opts = EvalOptions {
        concurrency: args.concurrency,
        resume: args.resume,
        preset: args.itp.preset.clone(),
        model_name: handle.name.clone(),
        metrics: metric_options(&args.metrics),
    };
    let outcome = match run(&records, &itp, &handle.model, frames.as_ref(), prober.as_ref(), &opts, &args.out).await {
        Ok(o) => o,
        Err(e @ EvalError::DuplicateIds(_)) => return Err(invalid(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    print!("{}", outcome.report.to_table()?);
    eprintln!(
        "ran {}, reused {}, report {}, traces {}",
        outcome.ran,
        outcome.reused,
        outcome.report_path.display(),
        outcome.traces_path.display()
    );
    if !outcome.incomplete.is_empty() {
        bail!(
            "{} episodes did not complete: {}",
            outcome.incomplete.len(),
            outcome.incomplete.join(", ")
        );
    }
    Ok(())
}

pub async fn episode(args: EpisodeArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, args.media.media_root.as_deref())?;
    let rec = match &args.id {
        Some(id) => records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| invalid(format!("no record with id {id}")))?,
        None => records.first().ok_or_else(|| invalid("dataset is empty"))?,
    };
    let itp = build_itp(&args.itp)?;
    let handle = build_model(&args.model)?;
    let frames = build_frames(&args.media)?;
    let prober = build_prober(args.media.probe);
    let trace = run_episode(rec, &itp, &handle.model, frames.as_ref(), prober.as_ref()).await?;
    println!("{}", serde_json::to_string_pretty(&trace)?);
    match (&trace.aborted_at, &trace.error) {
        (Some(k), err) => Err(anyhow!("episode aborted at round {k}: {}", err.as_deref().unwrap_or("model error"))),
        _ => Ok(()),
    }
}
