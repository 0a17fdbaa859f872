//! Metrics CSV and run summary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{bits_ledger, EngineError, MetricsRecord, RunOutput, RunStatus};
use crate::analysis::{fit_linear_rate, WindowPolicy};

pub const METRICS_HEADER: &str = "iter,objective,consensus_err,merit,bits,comm_round";

/// Writes one row per iteration. Wall-clock time is left out so reruns
/// produce identical files.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{},{}",
            r.iter,
            r.objective,
            r.consensus_error,
            r.merit,
            r.bits,
            u8::from(r.comm_round)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: String,
    pub iters: usize,
    pub total_bits: u64,
    pub final_objective: f64,
    /// Fitted slope of `log|f(avg_k) - f(avg_K)|`; absent when too few
    /// usable points remain.
    pub rate_slope: Option<f64>,
    pub rate_r2: Option<f64>,
}

impl Summary {
    pub fn from_output(out: &RunOutput) -> Self {
        let status = match out.status {
            RunStatus::Converged => "converged",
            RunStatus::MaxIters => "max_iters",
        };
        let final_objective = out.records.last().map_or(f64::NAN, |r| r.objective);
        let gaps: Vec<f64> = out.records.iter().map(|r| (r.objective - final_objective).abs()).collect();
        let fit = fit_linear_rate(&gaps, WindowPolicy::default()).ok();
        Summary {
            status: status.to_string(),
            iters: out.records.len(),
            total_bits: bits_ledger(&out.records).0,
            final_objective,
            rate_slope: fit.as_ref().map(|f| f.slope),
            rate_r2: fit.as_ref().map(|f| f.r2),
        }
    }

    pub fn to_json_pretty(&self) -> Result<String, EngineError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows() {
        let rec = |iter, bits, comm| MetricsRecord {
            iter,
            objective: 1.5,
            consensus_error: 0.0,
            merit: 2.0e-3,
            bits,
            comm_round: comm,
            wallclock: 0.25,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[rec(0, 0, false), rec(1, 74, true)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{METRICS_HEADER}\n0,1.5e0,0e0,2e-3,0,0\n1,1.5e0,0e0,2e-3,74,1\n"));
    }
}
