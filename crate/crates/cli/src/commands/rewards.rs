use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use anyhow::{Context, Result};
use refocus_core::rewards::{group_advantages, score_completion, ClueMetric, RewardBreakdown, RewardOptions, RewardWeights};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{invalid, load_dataset, write_atomic};
use crate::args::{ClueMetricArg, RewardsArgs};

#[derive(Deserialize)]
struct Completion {
    id: String,
    completion: String,
    #[serde(default)]
    group: Option<Value>,
}

#[derive(Serialize)]
struct Scored<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<&'a Value>,
    #[serde(flatten)]
    reward: RewardBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    advantage: Option<f64>,
}

fn group_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn run(args: RewardsArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, None)?;
    let by_id: HashMap<&str, _> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let text = std::fs::read_to_string(&args.completions)
        .with_context(|| format!("reading {}", args.completions.display()))?;
    let mut completions = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: Completion = serde_json::from_str(line)
            .map_err(|e| invalid(format!("{} line {}: {e}", args.completions.display(), i + 1)))?;
        completions.push(c);
    }

    let mut orphans: Vec<&str> = completions
        .iter()
        .map(|c| c.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !orphans.is_empty() {
        orphans.sort_unstable();
        orphans.dedup();
        return Err(invalid(format!("JoinFailure: no dataset record for ids {}", orphans.join(", "))));
    }

    let opts = RewardOptions {
        weights: RewardWeights::new(args.lambda_clue, args.lambda_ans, args.lambda_fmt)?,
        clue_metric: match args.clue_metric {
            ClueMetricArg::Iou => ClueMetric::Iou,
            ClueMetricArg::L1 => ClueMetric::L1,
        },
    };
    let mut scored = Vec::with_capacity(completions.len());
    for c in &completions {
        let reward = score_completion(&c.completion, by_id[c.id.as_str()], &opts)
            .map_err(|e| invalid(format!("{}: {e}", c.id)))?;
        scored.push(Scored {
            id: &c.id,
            group: c.group.as_ref(),
            reward,
            advantage: None,
        });
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in scored.iter().enumerate() {
        if let Some(g) = s.group {
            groups.entry(group_key(g)).or_default().push(i);
        }
    }
    for members in groups.values() {
        let totals: Vec<f64> = members.iter().map(|&i| scored[i].reward.total).collect();
        for (&i, a) in members.iter().zip(group_advantages(&totals, args.epsilon)) {
            scored[i].advantage = Some(a);
        }
    }

    let mut out = String::new();
    for s in &scored {
        let _ = writeln!(out, "{}", serde_json::to_string(s)?);
    }
    match &args.out {
        Some(path) => write_atomic(path, &out)?,
        None => print!("{out}"),
    }
    eprintln!("{} completions scored, {} groups", scored.len(), groups.len());
    Ok(())
}
