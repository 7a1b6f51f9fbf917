use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use pase_core::eval::{evaluate, read_eval_manifest, EvalConfig};
use serde::{Deserialize, Serialize};

use crate::config::{config_error, resolve, write_snapshot};
use crate::Globals;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_dir: Option<PathBuf>,
    /// Reference manifest, e.g. the `metadata.jsonl` written by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub eval: EvalConfig,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// TOML config; external metric clients go under `[[eval.clients]]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    enhanced_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// External metric to report (repeatable); replaces the configured list.
    #[arg(long = "metric")]
    metrics: Vec<String>,
}

pub fn run(args: EvaluateArgs, g: &Globals) -> Result<()> {
    let base = EvaluateConfig { enhanced_dir: None, manifest: None, eval: EvalConfig::default() };
    let mut cfg = resolve(&base, args.config.as_deref())?;
    cfg.enhanced_dir = args.enhanced_dir.or(cfg.enhanced_dir);
    cfg.manifest = args.manifest.or(cfg.manifest);
    if !args.metrics.is_empty() {
        cfg.eval.metrics = args.metrics;
    }
    if g.deterministic {
        cfg.eval.max_in_flight = 1;
    }
    let (Some(enhanced), Some(manifest)) = (cfg.enhanced_dir.clone(), cfg.manifest.clone()) else {
        return Err(config_error("evaluate needs --enhanced-dir and --manifest"));
    };
    let clients = cfg.eval.build_clients().map_err(|e| config_error(e.to_string()))?;
    write_snapshot(&g.output_dir, "evaluate", &cfg)?;

    let references = read_eval_manifest(&manifest)?;
    let report = evaluate(&enhanced, &references, &cfg.eval, &clients)?;
    for (metric, agg) in &report.aggregates {
        tracing::info!(metric = %metric, mean = ?agg.mean, std = ?agg.std, count = agg.count, failures = agg.failures, "aggregate");
    }
    for (metric, reason) in &report.skipped {
        tracing::warn!(metric = %metric, reason = %reason, "metric skipped");
    }
    let out = g.output_dir.join(REPORT_FILE);
    std::fs::write(&out, report.to_json()?)?;
    tracing::info!(report = %out.display(), utterances = report.utterances.len(), "evaluation finished");
    Ok(())
}
