//! Output files: JSONL metrics, CSV summaries and curves. Every file is
//! written to a temporary sibling and renamed into place, so outputs are
//! either complete or absent.

use std::path::Path;

use crate::error::Result;
use crate::trainer::StepMetrics;

/// Write-to-temp plus atomic rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    std::fs::write(&tmp, contents.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One JSON object per batch step.
pub fn render_metrics_jsonl(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Final run summary row.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub r_q: f64,
    pub r_o: f64,
    pub seed: u64,
    pub final_reward: f64,
    pub completions_used: usize,
    pub wallclock_micros: u64,
}

pub fn render_summary_csv(row: &SummaryRow) -> String {
    format!(
        "r_q,r_o,seed,final_reward,completions_used,wallclock_micros\n{},{},{},{},{},{}\n",
        row.r_q, row.r_o, row.seed, row.final_reward, row.completions_used, row.wallclock_micros
    )
}

/// Per-epoch means of the logged curves.
pub fn render_curves_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("epoch,mean_reward,pg_loss,kl\n");
    let mut epoch = None;
    let mut acc = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let flush = |epoch: u32, acc: &mut (f64, f64, f64, usize), out: &mut String| {
        let n = acc.3 as f64;
        out.push_str(&format!(
            "{},{},{},{}\n",
            epoch,
            acc.0 / n,
            acc.1 / n,
            acc.2 / n
        ));
        *acc = (0.0, 0.0, 0.0, 0);
    };
    for m in metrics {
        if epoch != Some(m.epoch) {
            if let Some(e) = epoch {
                flush(e, &mut acc, &mut out);
            }
            epoch = Some(m.epoch);
        }
        acc.0 += m.mean_reward;
        acc.1 += m.pg_loss;
        acc.2 += m.kl;
        acc.3 += 1;
    }
    if let Some(e) = epoch {
        flush(e, &mut acc, &mut out);
    }
    out
}
