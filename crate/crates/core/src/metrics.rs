//! Run statistics and the final report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamgr::ValidationStats;
use crate::journal::{AbortCause, FinishedTask};
use crate::sim::Micros;
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    pub total_us: Micros,
    pub count: u64,
}

impl Mean {
    pub fn add(&mut self, us: Micros) {
        self.total_us += us;
        self.count += 1;
    }

    pub fn mean_ms(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_us as f64 / self.count as f64 / 1000.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortCounts {
    pub validation: u64,
    pub early: u64,
    pub power: u64,
}

impl AbortCounts {
    pub fn add(&mut self, cause: AbortCause, n: u64) {
        match cause {
            AbortCause::Validation => self.validation += n,
            AbortCause::Early => self.early += n,
            AbortCause::Power => self.power += n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsCollector {
    pub suspension: Mean,
    pub recovery: Mean,
    pub recentness: Mean,
    pub aborts: AbortCounts,
    pub power_failures: u64,
    pub checkpoints: u64,
    pub became_lengthy: u64,
    pub lv_suspensions: u64,
    pub mark_finished_calls: u64,
    pub on_time_us: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub finished: u64,
    pub per_second: f64,
    pub lengthy_class: bool,
    pub finished_as_lengthy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: String,
    pub trace: String,
    pub duration_ms: u64,
    pub seed: u64,
    pub finished_total: u64,
    /// Finished tasks per second over the whole run.
    pub forward_progress: f64,
    pub lengthy_class_progress: f64,
    pub short_class_progress: f64,
    pub workloads: BTreeMap<String, WorkloadStats>,
    pub suspension_ms: f64,
    pub suspensions: u64,
    pub recovery_ms: f64,
    pub recoveries: u64,
    pub recentness_ms: f64,
    pub aborts: AbortCounts,
    pub power_failures: u64,
    pub checkpoints: u64,
    pub became_lengthy: u64,
    pub lv_suspensions: u64,
    pub mark_finished_calls: u64,
    pub on_time_ms: f64,
    pub commit_validation: ValidationStats,
    pub full_validation: ValidationStats,
    pub cross_check_mismatches: u64,
    pub harvested_j: f64,
    pub consumed_j: f64,
    pub events: u64,
    pub event_digest: String,
    /// SHA-256 over everything above.
    pub digest: String,
}

pub struct ReportInputs<'a> {
    pub scheme: &'a str,
    pub trace: &'a str,
    pub duration_ms: u64,
    pub seed: u64,
    pub lengthy_class_us: Micros,
    pub workloads: &'a [Workload],
    pub finished: &'a [FinishedTask],
    pub commit_validation: ValidationStats,
    pub full_validation: ValidationStats,
    pub cross_check_mismatches: u64,
    pub harvested_j: f64,
    pub consumed_j: f64,
    pub events: u64,
    pub event_digest: String,
}

impl MetricsCollector {
    pub fn report(&self, inp: ReportInputs<'_>) -> MetricsReport {
        let secs = inp.duration_ms as f64 / 1000.0;
        let rate = |n: u64| if secs > 0.0 { n as f64 / secs } else { 0.0 };
        let mut workloads = BTreeMap::new();
        let (mut long_n, mut short_n) = (0, 0);
        for (i, w) in inp.workloads.iter().enumerate() {
            let done: Vec<_> = inp.finished.iter().filter(|f| f.workload == i).collect();
            let n = done.len() as u64;
            let lengthy_class = w.vm_time_us > inp.lengthy_class_us;
            if lengthy_class {
                long_n += n;
            } else {
                short_n += n;
            }
            let e = workloads.entry(w.name.clone()).or_insert(WorkloadStats {
                finished: 0,
                per_second: 0.0,
                lengthy_class,
                finished_as_lengthy: 0,
            });
            e.finished += n;
            e.per_second = rate(e.finished);
            e.finished_as_lengthy += done.iter().filter(|f| f.lengthy).count() as u64;
        }
        let total = inp.finished.len() as u64;
        let mut r = MetricsReport {
            scheme: inp.scheme.to_string(),
            trace: inp.trace.to_string(),
            duration_ms: inp.duration_ms,
            seed: inp.seed,
            finished_total: total,
            forward_progress: rate(total),
            lengthy_class_progress: rate(long_n),
            short_class_progress: rate(short_n),
            workloads,
            suspension_ms: self.suspension.mean_ms(),
            suspensions: self.suspension.count,
            recovery_ms: self.recovery.mean_ms(),
            recoveries: self.recovery.count,
            recentness_ms: self.recentness.mean_ms(),
            aborts: self.aborts,
            power_failures: self.power_failures,
            checkpoints: self.checkpoints,
            became_lengthy: self.became_lengthy,
            lv_suspensions: self.lv_suspensions,
            mark_finished_calls: self.mark_finished_calls,
            on_time_ms: self.on_time_us as f64 / 1000.0,
            commit_validation: inp.commit_validation,
            full_validation: inp.full_validation,
            cross_check_mismatches: inp.cross_check_mismatches,
            harvested_j: inp.harvested_j,
            consumed_j: inp.consumed_j,
            events: inp.events,
            event_digest: inp.event_digest,
            digest: String::new(),
        };
        r.digest = r.compute_digest();
        r
    }
}

impl MetricsReport {
    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.digest.clear();
        let json = serde_json::to_string(&copy).expect("report serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn workload(&self, name: &str) -> Option<&WorkloadStats> {
        self.workloads.get(name)
    }

    pub fn finished(&self, name: &str) -> u64 {
        self.workload(name).map_or(0, |w| w.finished)
    }
}
