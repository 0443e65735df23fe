//! Merges training logs into plot-ready rows and summarises how fast each
//! run approaches its final validation recall.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::LogRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub iteration: u64,
    pub seconds: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Iteration at which a run first reached `fraction` of its final recall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub method: String,
    pub final_recall: f64,
    pub threshold: f64,
    pub iteration: u64,
    pub seconds: f64,
    pub final_iteration: u64,
}

fn metrics(method: &str, r: &LogRecord) -> Result<(f64, f64)> {
    match (r.val_recall, r.val_ndcg) {
        (Some(recall), Some(ndcg)) => Ok((recall, ndcg)),
        _ => Err(Error::InvalidInput(format!(
            "log `{method}` has a record without validation metrics at iteration {}",
            r.iteration
        ))),
    }
}

fn check_order(method: &str, records: &[LogRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("log `{method}` is empty")));
    }
    for w in records.windows(2) {
        if w[1].iteration <= w[0].iteration || w[1].seconds < w[0].seconds {
            return Err(Error::InvalidInput(format!(
                "log `{method}` is not ordered at iteration {}",
                w[1].iteration
            )));
        }
    }
    Ok(())
}

pub fn merge(logs: &[(String, Vec<LogRecord>)]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (method, records) in logs {
        check_order(method, records)?;
        for r in records {
            let (recall, ndcg) = metrics(method, r)?;
            out.push(CurvePoint {
                method: method.clone(),
                iteration: r.iteration,
                seconds: r.seconds,
                recall,
                ndcg,
            });
        }
    }
    Ok(out)
}

/// The final record's recall is the reference; returns the first record at
/// or above `fraction` of it.
pub fn iterations_to_fraction(method: &str, records: &[LogRecord], fraction: f64) -> Result<ThresholdSummary> {
    check_order(method, records)?;
    let last = records.last().expect("non-empty");
    let (final_recall, _) = metrics(method, last)?;
    let threshold = fraction * final_recall;
    for r in records {
        let (recall, _) = metrics(method, r)?;
        if recall >= threshold {
            return Ok(ThresholdSummary {
                method: method.to_string(),
                final_recall,
                threshold,
                iteration: r.iteration,
                seconds: r.seconds,
                final_iteration: last.iteration,
            });
        }
    }
    unreachable!("the final record always meets its own threshold")
}

pub fn write_csv<W: Write>(points: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,iteration,seconds,recall,ndcg")?;
    for p in points {
        writeln!(w, "{},{},{},{},{}", p.method, p.iteration, p.seconds, p.recall, p.ndcg)?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[ThresholdSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,final_recall,threshold,iteration,seconds,final_iteration")?;
    for s in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.method, s.final_recall, s.threshold, s.iteration, s.seconds, s.final_iteration
        )?;
    }
    Ok(())
}
