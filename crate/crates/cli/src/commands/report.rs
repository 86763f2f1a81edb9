use std::fs::File;
use std::io::{BufRead, BufReader};

use anyhow::{Context, Result};
use refocus_core::engine::EpisodeTrace;
use refocus_core::eval::build_report;
use refocus_core::metrics::write_report;

use super::{invalid, load_dataset, metric_options};
use crate::args::ReportArgs;

pub fn run(args: ReportArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, None)?;
    let file = File::open(&args.traces).with_context(|| format!("opening {}", args.traces.display()))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: EpisodeTrace = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{} line {}: {e}", args.traces.display(), i + 1)))?;
        traces.push(trace);
    }
    let k = traces.iter().map(|t| t.iterations.len()).max().unwrap_or(0);
    let report = build_report(&records, &traces, &args.preset, &args.model, k, metric_options(&args.metrics))
        .map_err(|e| invalid(e.to_string()))?;
    print!("{}", report.to_table().map_err(|e| invalid(e.to_string()))?);
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_report(&report, out).map_err(|e| invalid(e.to_string()))?;
    }
    Ok(())
}
