//! Event log and the record of finished tasks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamgr::{CommitRecord, ValidityInterval};
use crate::kernel::TaskId;
use crate::sim::{CrashPoint, Micros, Timestamp};
use crate::workload::ObjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortCause {
    Validation,
    Early,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    PowerOn { cold: bool },
    PowerOff { crash: Option<CrashPoint> },
    LowVoltage,
    RecoveryDone { duration_us: Micros, recreated: usize, resumed: usize },
    Lengthy { task: TaskId },
    Suspended { task: TaskId },
    Resumed { task: TaskId },
    Commit { task: TaskId, workload: String, begin: i64, end: i64, seq: u64 },
    Abort { task: TaskId, cause: AbortCause },
    Checkpoint { duration_us: Micros, durable: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub t_us: Micros,
    pub ctx: Timestamp,
    #[serde(flatten)]
    pub event: Event,
}

/// NDJSON event stream with a running SHA-256 over every line.
#[derive(Debug, Clone)]
pub struct EventLog {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl EventLog {
    pub fn new(keep_lines: bool) -> Self {
        Self {
            hasher: Sha256::new(),
            lines: keep_lines.then(Vec::new),
            count: 0,
        }
    }

    pub fn push(&mut self, t_us: Micros, ctx: Timestamp, event: Event) {
        let line = serde_json::to_string(&LogLine { t_us, ctx, event }).expect("event serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(l) = &mut self.lines {
            l.push(line);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn lines(&self) -> &[String] {
        self.lines.as_deref().unwrap_or(&[])
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// A committed task, kept for metrics and the serializability oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinishedTask {
    pub task: TaskId,
    pub program: usize,
    pub workload: usize,
    pub interval: ValidityInterval,
    pub commit_seq: u64,
    pub finished_at_us: Micros,
    pub lengthy: bool,
    pub reads: Vec<(ObjectId, Option<TaskId>)>,
    pub writes: Vec<(ObjectId, Vec<u8>)>,
}

impl FinishedTask {
    pub fn new(rec: &CommitRecord, program: usize, workload: usize, at_us: Micros) -> Self {
        Self {
            task: rec.task,
            program,
            workload,
            interval: rec.interval,
            commit_seq: rec.commit_seq,
            finished_at_us: at_us,
            lengthy: rec.lengthy,
            reads: rec.reads.clone(),
            writes: rec.writes.clone(),
        }
    }
}

/// Finished tasks split by whether their results survive a power failure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Journal {
    durable: Vec<FinishedTask>,
    pending: Vec<FinishedTask>,
}

impl Journal {
    pub fn durable(&self) -> &[FinishedTask] {
        &self.durable
    }

    pub fn pending(&self) -> &[FinishedTask] {
        &self.pending
    }

    pub fn push_durable(&mut self, f: FinishedTask) {
        self.durable.push(f);
    }

    pub fn push_pending(&mut self, f: FinishedTask) {
        self.pending.push(f);
    }

    /// Returns how many entries moved.
    pub fn promote_all(&mut self) -> usize {
        let n = self.pending.len();
        self.durable.append(&mut self.pending);
        n
    }

    pub fn promote(&mut self, task: TaskId) -> bool {
        match self.pending.iter().position(|f| f.task == task) {
            Some(i) => {
                let f = self.pending.remove(i);
                self.durable.push(f);
                true
            }
            None => false,
        }
    }

    pub fn drop_pending(&mut self) -> usize {
        let n = self.pending.len();
        self.pending.clear();
        n
    }

    pub fn program_finished(&self, program: usize) -> bool {
        self.durable.iter().any(|f| f.program == program)
    }
}
