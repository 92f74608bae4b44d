//! Per-step loss telemetry and trace comparison.
//!
//! `loss_mse`, `loss_lap` and `loss_ssim` are each term's weighted contribution
//! to `loss_total`, summed over tasks. `loss_binary` and `loss_main` are the
//! unweighted single-task losses; a column is empty when its task is absent.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str =
    "step,phase,loss_total,loss_mse,loss_lap,loss_ssim,loss_binary,loss_main";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: u8,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_lap: f64,
    pub loss_ssim: f64,
    pub loss_binary: Option<f64>,
    pub loss_main: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.loss_total,
            self.loss_mse,
            self.loss_lap,
            self.loss_ssim,
            opt(self.loss_binary),
            opt(self.loss_main)
        )
    }
}

pub fn write_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::Format(format!(
            "trace must start with header {TRACE_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!(
                "trace line {}: expected 8 fields",
                i + 2
            )));
        }
        let bad = |what: &str| Error::Format(format!("trace line {}: bad {what}", i + 2));
        let real = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let optional = |s: &str, what: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                real(s, what).map(Some)
            }
        };
        rows.push(TraceRow {
            step: f[0].parse().map_err(|_| bad("step"))?,
            phase: f[1].parse().map_err(|_| bad("phase"))?,
            loss_total: real(f[2], "loss_total")?,
            loss_mse: real(f[3], "loss_mse")?,
            loss_lap: real(f[4], "loss_lap")?,
            loss_ssim: real(f[5], "loss_ssim")?,
            loss_binary: optional(f[6], "loss_binary")?,
            loss_main: optional(f[7], "loss_main")?,
        });
    }
    Ok(rows)
}

/// A labelled trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub label: String,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub label: String,
    /// Mean `loss_total` over the last tenth of the steps (at least one).
    pub final_loss: f64,
    /// Trapezoidal area under `loss_total` against step.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceComparison {
    pub steps: Vec<usize>,
    pub labels: Vec<String>,
    /// `losses[i][j]`: loss_total of trace `j` at `steps[i]`.
    pub losses: Vec<Vec<f64>>,
    pub summaries: Vec<TraceSummary>,
    /// Trace indices sorted by ascending final loss.
    pub ranking: Vec<usize>,
    /// Raised when the first (reference) trace ends above another one.
    pub warnings: Vec<String>,
}

fn summarize(t: &LossTrace) -> TraceSummary {
    let n = t.rows.len();
    let tail = (n / 10).max(1);
    let final_loss = t.rows[n - tail..].iter().map(|r| r.loss_total).sum::<f64>() / tail as f64;
    let auc = t
        .rows
        .windows(2)
        .map(|w| 0.5 * (w[0].loss_total + w[1].loss_total) * (w[1].step - w[0].step) as f64)
        .sum();
    TraceSummary {
        label: t.label.clone(),
        final_loss,
        auc,
    }
}

/// Aligns traces on their common step grid and summarizes them. The first
/// trace is the reference for the warnings.
pub fn loss_trace_compare(traces: &[LossTrace]) -> Result<TraceComparison> {
    if traces.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two traces to compare".into(),
        ));
    }
    let steps: Vec<usize> = traces[0].rows.iter().map(|r| r.step).collect();
    if steps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trace {} is empty",
            traces[0].label
        )));
    }
    for t in &traces[1..] {
        if !t.rows.iter().map(|r| r.step).eq(steps.iter().copied()) {
            return Err(Error::InvalidArgument(format!(
                "trace {} has a different step grid from {}",
                t.label, traces[0].label
            )));
        }
    }
    let losses = (0..steps.len())
        .map(|i| traces.iter().map(|t| t.rows[i].loss_total).collect())
        .collect();
    let summaries: Vec<TraceSummary> = traces.iter().map(summarize).collect();
    let mut ranking: Vec<usize> = (0..traces.len()).collect();
    ranking.sort_by(|&a, &b| summaries[a].final_loss.total_cmp(&summaries[b].final_loss));
    let r = &summaries[0];
    let warnings = summaries[1..]
        .iter()
        .filter(|s| r.final_loss > s.final_loss)
        .map(|s| {
            format!(
                "{} final loss {:.6} is above {} final loss {:.6}",
                r.label, r.final_loss, s.label, s.final_loss
            )
        })
        .collect();
    Ok(TraceComparison {
        steps,
        labels: traces.iter().map(|t| t.label.clone()).collect(),
        losses,
        summaries,
        ranking,
        warnings,
    })
}

impl TraceComparison {
    /// `step,<label>...` table of loss_total.
    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.labels.join(","));
        for (step, row) in self.steps.iter().zip(&self.losses) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{step},{}", vals.join(","));
        }
        s
    }

    /// Summary rows in ranking order, then warnings.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>14} {:>16}\n", "trace", "final loss", "AUC");
        for &i in &self.ranking {
            let m = &self.summaries[i];
            let _ = writeln!(s, "{:<28} {:>14.6} {:>16.4}", m.label, m.final_loss, m.auc);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(label: &str, f: impl Fn(usize) -> f64) -> LossTrace {
        LossTrace {
            label: label.into(),
            rows: (1..=20)
                .map(|step| TraceRow {
                    step,
                    phase: 2,
                    loss_total: f(step),
                    loss_mse: 0.1,
                    loss_lap: 0.2,
                    loss_ssim: 0.3,
                    loss_binary: if step % 2 == 0 { Some(0.25) } else { None },
                    loss_main: Some(1.0 / 3.0),
                })
                .collect(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = trace("a", |s| 1.0 / s as f64);
        let text = write_csv(&t.rows);
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, t.rows);
        assert_eq!(write_csv(&back), text);
        assert!(parse_csv("step,loss\n1,2\n").is_err());
    }

    #[test]
    fn identical_traces_compare_equal() {
        let a = trace("a", |s| 1.0 / s as f64);
        let c = loss_trace_compare(&[
            a.clone(),
            LossTrace {
                label: "b".into(),
                ..a
            },
        ])
        .unwrap();
        assert!(c.losses.iter().all(|r| r[0] == r[1]));
        assert_eq!(c.summaries[0].final_loss, c.summaries[1].final_loss);
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn ranking_warnings_and_grid_check() {
        let a = trace("proposed", |s| 2.0 / s as f64);
        let b = trace("alpha61", |s| 1.0 / s as f64);
        let c = loss_trace_compare(&[a.clone(), b]).unwrap();
        assert_eq!(c.ranking, vec![1, 0]);
        assert_eq!(c.warnings.len(), 1);
        assert_eq!(c.to_text().lines().count(), 4);
        let mut short = a.clone();
        short.rows.pop();
        assert!(loss_trace_compare(&[a, short]).is_err());
    }
}
