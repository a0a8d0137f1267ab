use serde::{Deserialize, Serialize};

use super::{DataObject, TaskTxn};
use crate::sim::Timestamp;

/// Serialization window of a task, in context-switch units. Empty when
/// `begin > end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidityInterval {
    pub begin: i64,
    pub end: i64,
}

impl ValidityInterval {
    pub const INITIAL: ValidityInterval = ValidityInterval { begin: 0, end: 0 };

    pub fn new(begin: i64, end: i64) -> Self {
        Self { begin, end }
    }

    /// The unconstrained window a task starts with before any action.
    pub fn open() -> Self {
        Self {
            begin: 0,
            end: i64::MAX,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.begin <= self.end
    }
}

/// Which write-side rule guards against a finished reader being overtaken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Each object also remembers the latest begin among finished tasks
    /// that read its current version; a writer must start after it.
    #[default]
    ReadMarked,
    /// The four update rules only.
    Classic,
}

/// Comparison count of one validation call together with its size inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationCost {
    pub comparisons: u64,
    /// Distinct object accesses (merged reads plus writes).
    pub n: u64,
    /// Tasks that finished while the validated task was live.
    pub m: u64,
}

impl ValidationCost {
    pub fn bound(&self) -> u64 {
        2 * (self.n + self.m) + 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationStats {
    pub calls: u64,
    pub max_comparisons: u64,
    pub bound_violations: u64,
    /// Smallest `bound - comparisons` observed.
    pub min_slack: Option<u64>,
}

impl ValidationStats {
    pub fn record(&mut self, c: ValidationCost) {
        self.calls += 1;
        self.max_comparisons = self.max_comparisons.max(c.comparisons);
        if c.comparisons > c.bound() {
            self.bound_violations += 1;
        }
        let slack = c.bound().saturating_sub(c.comparisons);
        self.min_slack = Some(self.min_slack.map_or(slack, |s| s.min(slack)));
    }
}

struct Counter(u64);

impl Counter {
    fn raise(&mut self, v: &mut i64, lower: i64) {
        self.0 += 1;
        if lower > *v {
            *v = lower;
        }
    }

    fn cap(&mut self, v: &mut i64, upper: i64) {
        self.0 += 1;
        if upper < *v {
            *v = upper;
        }
    }
}

fn read_half(objects: &[DataObject], txn: &TaskTxn, iv: &mut ValidityInterval, c: &mut Counter) {
    for (&obj, r) in &txn.reads {
        c.raise(&mut iv.begin, r.max_begin + 1);
        if let Some(tau) = objects[obj as usize].first_commit_after(r.first_seq) {
            c.cap(&mut iv.end, tau.interval.begin - 1);
        }
    }
}

fn write_half(
    objects: &[DataObject],
    txn: &TaskTxn,
    mode: ValidationMode,
    iv: &mut ValidityInterval,
    c: &mut Counter,
) {
    for (&obj, w) in &txn.writes {
        let o = &objects[obj as usize];
        let tau = o.last_commit_after(w.seq);
        match mode {
            ValidationMode::Classic => {
                c.raise(&mut iv.begin, w.snapshot.begin + 1);
                if let Some(tau) = tau {
                    c.raise(&mut iv.begin, tau.interval.begin + 1);
                }
            }
            ValidationMode::ReadMarked => {
                // Committer begins grow per object and a reader of the
                // current version starts after its writer, so the most
                // recent of these bounds is also the largest.
                let bound = match (o.read_mark, tau) {
                    (Some(mark), _) => mark,
                    (None, Some(tau)) => tau.interval.begin,
                    (None, None) => w.snapshot.begin,
                };
                debug_assert!(bound >= w.snapshot.begin);
                debug_assert!(tau.is_none_or(|t| bound >= t.interval.begin));
                c.raise(&mut iv.begin, bound + 1);
            }
        }
    }
}

/// The full backward validation over a task's read and write actions.
pub(crate) fn full_validation(
    objects: &[DataObject],
    txn: &TaskTxn,
    now: Timestamp,
    mode: ValidationMode,
) -> (ValidityInterval, u64) {
    let mut iv = ValidityInterval::new(0, now as i64);
    let mut c = Counter(0);
    read_half(objects, txn, &mut iv, &mut c);
    write_half(objects, txn, mode, &mut iv, &mut c);
    c.0 += 1;
    (iv, c.0)
}

/// Commit-time validation when the read half has already been maintained
/// incrementally in `txn.running`.
pub(crate) fn commit_validation(
    objects: &[DataObject],
    txn: &TaskTxn,
    now: Timestamp,
    mode: ValidationMode,
) -> (ValidityInterval, u64) {
    let mut iv = txn.running;
    let mut c = Counter(0);
    c.cap(&mut iv.end, now as i64);
    write_half(objects, txn, mode, &mut iv, &mut c);
    c.0 += 1;
    (iv, c.0)
}
