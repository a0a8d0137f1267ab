//! Running whole experiments and lining schemes up against each other.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ExperimentConfig, Scheme};
use crate::error::SimError;
use crate::machine::Machine;
use crate::metrics::MetricsReport;

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    let mut m = Machine::new(cfg)?;
    m.run()?;
    Ok(m.report())
}

/// Runs and also writes the report as JSON and the events as NDJSON.
pub fn run_to_files(cfg: &ExperimentConfig, report: &Path, events: Option<&Path>) -> Result<MetricsReport, SimError> {
    let mut m = Machine::with_event_lines(cfg, events.is_some())?;
    m.run()?;
    let r = m.report();
    std::fs::write(report, serde_json::to_string_pretty(&r).expect("report serializes"))?;
    if let Some(p) = events {
        let mut text = m.events().lines().join("\n");
        text.push('\n');
        std::fs::write(p, text)?;
    }
    Ok(r)
}

/// One column of a comparison: a scheme and, for checkpointing schemes,
/// the checkpoint period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub scheme: Scheme,
    pub period_ms: Option<u64>,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.period_ms {
            Some(p) => format!("{}({p}ms)", self.scheme.name().to_uppercase()),
            None => self.scheme.name().to_uppercase(),
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.scheme = self.scheme;
        if let Some(p) = self.period_ms {
            c.checkpoint.period_ms = p;
        }
        c
    }
}

/// OURS, both baselines at 20 ms and 200 ms, and the naive rerun.
pub fn standard_variants() -> Vec<Variant> {
    let mut v = vec![Variant {
        scheme: Scheme::Ours,
        period_ms: None,
    }];
    for p in [20, 200] {
        for scheme in [Scheme::Sys, Scheme::Log] {
            v.push(Variant {
                scheme,
                period_ms: Some(p),
            });
        }
    }
    v.push(Variant {
        scheme: Scheme::NaiveRerun,
        period_ms: None,
    });
    v
}

pub fn compare(base: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, MetricsReport)>, SimError> {
    variants
        .iter()
        .map(|v| run_experiment(&v.apply(base)).map(|r| (*v, r)))
        .collect()
}

pub fn comparison_table(rows: &[(Variant, MetricsReport)]) -> String {
    let mut names: Vec<&String> = rows.iter().flat_map(|(_, r)| r.workloads.keys()).collect();
    names.sort();
    names.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<13} {:>9} {:>9} {:>9}", "scheme", "tasks/s", "short/s", "long/s");
    for n in &names {
        let _ = write!(out, " {:>9}", n);
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>9} {:>6}", "susp_ms", "rec_ms", "recent_ms", "fails");
    for (v, r) in rows {
        let _ = write!(
            out,
            "{:<13} {:>9.2} {:>9.2} {:>9.2}",
            v.label(),
            r.forward_progress,
            r.short_class_progress,
            r.lengthy_class_progress
        );
        for n in &names {
            let _ = write!(out, " {:>9}", r.finished(n));
        }
        let _ = writeln!(
            out,
            " {:>8.2} {:>8.2} {:>9.2} {:>6}",
            r.suspension_ms, r.recovery_ms, r.recentness_ms, r.power_failures
        );
    }
    for (label, r) in ratio_rows(rows) {
        let _ = writeln!(out, "{label:<22} {r:>6.2}");
    }
    out
}

/// OURS forward progress divided by each checkpointing variant's, for the
/// whole task mix and for short tasks only.
pub fn ratio_rows(rows: &[(Variant, MetricsReport)]) -> Vec<(String, f64)> {
    let Some((_, ours)) = rows.iter().find(|(v, _)| v.scheme == Scheme::Ours) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (v, r) in rows.iter().filter(|(v, _)| v.scheme.checkpoints()) {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::INFINITY };
        out.push((format!("OURS/{}", v.label()), ratio(ours.forward_progress, r.forward_progress)));
        out.push((
            format!("OURS/{} short", v.label()),
            ratio(ours.short_class_progress, r.short_class_progress),
        ));
    }
    out
}

/// One CSV row per variant, for plotting.
pub fn comparison_csv(rows: &[(Variant, MetricsReport)]) -> String {
    let mut out = String::from(
        "variant,scheme,period_ms,forward_progress,short_progress,lengthy_progress,suspension_ms,recovery_ms,recentness_ms,power_failures\n",
    );
    for (v, r) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            v.label(),
            v.scheme.name(),
            v.period_ms.map(|p| p.to_string()).unwrap_or_default(),
            r.forward_progress,
            r.short_class_progress,
            r.lengthy_class_progress,
            r.suspension_ms,
            r.recovery_ms,
            r.recentness_ms,
            r.power_failures
        );
    }
    out
}
