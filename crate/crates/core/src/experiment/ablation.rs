use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::{RunConfig, Variant};
use crate::experiment::reports::emit_reports;
use crate::experiment::run::run_experiment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_avg_acc: f64,
    pub mean_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

/// Parses a comma-separated list of chain stages, e.g. `lora_ft,composition,ortho`.
pub fn parse_stages(list: &str) -> Result<Vec<String>> {
    let stages: Vec<String> = list
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if stages.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    for s in &stages {
        Variant::from_stage(s)?;
    }
    Ok(stages)
}

/// Runs every stage for every seed (in parallel) on top of `base`. When
/// `out_dir` is given each run writes its reports to `<out>/<stage>/seed-<n>`.
pub fn run_ablation(
    base: &RunConfig,
    stages: &[String],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let jobs: Vec<(String, u64)> = stages
        .iter()
        .flat_map(|s| seeds.iter().map(move |seed| (s.clone(), *seed)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(stage, seed)| {
            let cfg = RunConfig {
                seed: *seed,
                variant: Variant::from_stage(stage)?,
                ..base.clone()
            };
            let artifacts = run_experiment(&cfg)?;
            if let Some(dir) = out_dir {
                emit_reports(&artifacts, dir.join(stage).join(format!("seed-{seed}")))?;
            }
            Ok(AblationRow {
                variant: stage.clone(),
                seed: *seed,
                avg_acc: artifacts.results.avg_acc,
                forgetting: artifacts.results.forgetting,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = stages
        .iter()
        .map(|stage| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == stage).collect();
            let n = mine.len() as f64;
            let forgetting: Option<Vec<f64>> = mine.iter().map(|r| r.forgetting).collect();
            VariantSummary {
                variant: stage.clone(),
                runs: mine.len(),
                mean_avg_acc: mine.iter().map(|r| r.avg_acc).sum::<f64>() / n,
                mean_forgetting: forgetting.map(|f| f.iter().sum::<f64>() / n),
            }
        })
        .collect();
    let report = AblationReport { rows, summary };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

impl AblationReport {
    /// Plain-text comparison table, one line per stage.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>5} {:>10} {:>12}\n",
            "variant", "runs", "avg_acc", "forgetting"
        );
        for s in &self.summary {
            let f = s
                .mean_forgetting
                .map_or("-".to_string(), |f| format!("{:.2}", 100.0 * f));
            out.push_str(&format!(
                "{:<12} {:>5} {:>10.2} {:>12}\n",
                s.variant,
                s.runs,
                100.0 * s.mean_avg_acc,
                f
            ));
        }
        out
    }
}
