//! Report serialization: per-sample JSONL and aggregate CSV.
//!
//! Both formats are byte-deterministic for identical inputs: JSONL fields
//! follow the struct declaration order and floats use Rust's shortest
//! round-trip formatting.

use crate::error::{Error, Result};
use crate::pipeline::{EvalSummary, SampleResult};

/// CSV header shared by `eval` and `sweep` outputs.
pub const SUMMARY_CSV_HEADER: &str = "tau,gamma,r_max,accuracy,mean_gflops,exit_rate,mean_keep_ratio";

/// One JSON object per line, dataset order.
pub fn results_jsonl(results: &[SampleResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format(format!("result encode: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Aggregate CSV with one row per summary. The accuracy field is empty for
/// unlabeled runs.
pub fn summaries_csv(summaries: &[EvalSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        let accuracy = s.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.tau,
            s.gamma,
            s.r_max,
            accuracy,
            s.mean_flops / 1e9,
            s.exit_rate,
            s.mean_keep_ratio
        ));
    }
    out
}
