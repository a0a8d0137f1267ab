//! Storage for the two checkpointing baselines: a double-buffered system
//! snapshot and an undo/redo log over the data objects.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datamgr::ValidityInterval;
use crate::error::SimError;
use crate::kernel::TaskId;
use crate::sim::{CrashInjector, CrashSite, Micros};
use crate::workload::ObjectId;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<S> {
    pub content: S,
    pub taken_at_us: Micros,
}

/// Two NVM slots and a selector bit. A slot being written is invalid until
/// the selector flips to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStore<S> {
    slots: [Option<Snapshot<S>>; 2],
    current: usize,
    completed: u64,
}

impl<S> Default for SnapshotStore<S> {
    fn default() -> Self {
        Self {
            slots: [None, None],
            current: 0,
            completed: 0,
        }
    }
}

impl<S> SnapshotStore<S> {
    pub fn latest(&self) -> Option<&Snapshot<S>> {
        self.slots[self.current].as_ref()
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Writes `content` chunk by chunk into the spare slot, then flips the
    /// selector.
    pub fn write(
        &mut self,
        content: S,
        chunks: usize,
        at_us: Micros,
        crash: &mut CrashInjector,
    ) -> Result<(), SimError> {
        let spare = 1 - self.current;
        self.slots[spare] = None;
        for _ in 0..chunks {
            crash.step(CrashSite::SnapshotChunk).map_err(SimError::Crash)?;
        }
        self.slots[spare] = Some(Snapshot {
            content,
            taken_at_us: at_us,
        });
        crash.step(CrashSite::SnapshotToggle).map_err(SimError::Crash)?;
        self.current = spare;
        self.completed += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogRecord {
    Undo { task: TaskId, obj: ObjectId, before: Vec<u8>, writer: Option<TaskId> },
    Write { task: TaskId, obj: ObjectId, after: Vec<u8> },
    Commit { task: TaskId, interval: ValidityInterval, writes: Vec<(ObjectId, Vec<u8>)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectImage {
    pub bytes: Vec<u8>,
    pub writer: Option<TaskId>,
}

/// Working copy of an unfinished task, captured at a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkingCopy {
    pub task: TaskId,
    pub obj: ObjectId,
    pub value: Vec<u8>,
}

/// The in-place NVM image of every object together with the log guarding
/// it. Commit markers sit in a VM buffer until the next checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteAheadLog {
    image: Vec<ObjectImage>,
    log: Vec<LogRecord>,
    applied: usize,
    buffer: Vec<LogRecord>,
    newly_durable: Vec<TaskId>,
}

impl WriteAheadLog {
    pub fn new(initial: Vec<Vec<u8>>) -> Self {
        Self {
            image: initial
                .into_iter()
                .map(|bytes| ObjectImage { bytes, writer: None })
                .collect(),
            log: Vec::new(),
            applied: 0,
            buffer: Vec::new(),
            newly_durable: Vec::new(),
        }
    }

    pub fn image(&self) -> &[ObjectImage] {
        &self.image
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn append_commit(&mut self, task: TaskId, interval: ValidityInterval, writes: Vec<(ObjectId, Vec<u8>)>) {
        self.buffer.push(LogRecord::Commit { task, interval, writes });
    }

    /// Tasks whose commit marker reached NVM since the last call.
    pub fn take_durable(&mut self) -> Vec<TaskId> {
        std::mem::take(&mut self.newly_durable)
    }

    pub fn on_power_failure(&mut self) {
        self.buffer.clear();
    }

    /// Last committed image of `obj`, counting markers not yet flushed.
    fn committed_image(&self, batch: &[LogRecord], obj: ObjectId) -> ObjectImage {
        for r in batch.iter().rev() {
            if let LogRecord::Commit { task, writes, .. } = r {
                if let Some((_, v)) = writes.iter().find(|(o, _)| *o == obj) {
                    return ObjectImage {
                        bytes: v.clone(),
                        writer: Some(*task),
                    };
                }
            }
        }
        self.recovered_image().swap_remove(obj as usize)
    }

    /// Flushes buffered markers and the current working copies, then
    /// applies the new records to the image.
    pub fn checkpoint(&mut self, working: &[WorkingCopy], crash: &mut CrashInjector) -> Result<(), SimError> {
        let mut batch = std::mem::take(&mut self.buffer);
        for w in working {
            let logged = self
                .log
                .iter()
                .chain(&batch)
                .any(|r| matches!(r, LogRecord::Undo { task, obj, .. } if *task == w.task && *obj == w.obj));
            if !logged {
                let prior = self.committed_image(&batch, w.obj);
                batch.push(LogRecord::Undo {
                    task: w.task,
                    obj: w.obj,
                    before: prior.bytes,
                    writer: prior.writer,
                });
            }
            batch.push(LogRecord::Write {
                task: w.task,
                obj: w.obj,
                after: w.value.clone(),
            });
        }
        for r in batch {
            crash.step(CrashSite::LogFlush).map_err(SimError::Crash)?;
            if let LogRecord::Commit { task, .. } = &r {
                self.newly_durable.push(*task);
            }
            self.log.push(r);
        }
        while self.applied < self.log.len() {
            crash.step(CrashSite::LogApply).map_err(SimError::Crash)?;
            match &self.log[self.applied] {
                LogRecord::Write { task, obj, after } => {
                    self.image[*obj as usize] = ObjectImage {
                        bytes: after.clone(),
                        writer: Some(*task),
                    };
                }
                LogRecord::Commit { task, writes, .. } => {
                    for (o, v) in writes {
                        self.image[*o as usize] = ObjectImage {
                            bytes: v.clone(),
                            writer: Some(*task),
                        };
                    }
                }
                LogRecord::Undo { .. } => {}
            }
            self.applied += 1;
        }
        let live: BTreeSet<TaskId> = working.iter().map(|w| w.task).collect();
        self.compact(&live);
        Ok(())
    }

    /// Once everything is applied, only the undo records of tasks that are
    /// still running matter; their before-images become the current
    /// committed values.
    fn compact(&mut self, live: &BTreeSet<TaskId>) {
        let rec = self.recovered_image();
        let mut kept = Vec::new();
        let mut dirty = BTreeSet::new();
        for r in &self.log {
            if let LogRecord::Undo { task, obj, .. } = r {
                if live.contains(task) {
                    let prior = &rec[*obj as usize];
                    kept.push(LogRecord::Undo {
                        task: *task,
                        obj: *obj,
                        before: prior.bytes.clone(),
                        writer: prior.writer,
                    });
                    dirty.insert(*obj);
                }
            }
        }
        for (i, img) in rec.into_iter().enumerate() {
            if !dirty.contains(&(i as ObjectId)) {
                self.image[i] = img;
            }
        }
        self.applied = kept.len();
        self.log = kept;
    }

    fn winners(&self) -> BTreeSet<TaskId> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Commit { task, .. } => Some(*task),
                _ => None,
            })
            .collect()
    }

    fn replay(&self, image: &mut [ObjectImage], mut step: impl FnMut() -> Result<(), SimError>) -> Result<(), SimError> {
        let winners = self.winners();
        for r in self.log.iter().rev() {
            if let LogRecord::Undo { task, obj, before, writer } = r {
                if !winners.contains(task) {
                    step()?;
                    image[*obj as usize] = ObjectImage {
                        bytes: before.clone(),
                        writer: *writer,
                    };
                }
            }
        }
        for r in &self.log {
            if let LogRecord::Commit { task, writes, .. } = r {
                step()?;
                for (o, v) in writes {
                    image[*o as usize] = ObjectImage {
                        bytes: v.clone(),
                        writer: Some(*task),
                    };
                }
            }
        }
        Ok(())
    }

    /// Undoes unfinished tasks, redoes finished ones and truncates the log.
    pub fn recover(&mut self, crash: &mut CrashInjector) -> Result<(), SimError> {
        self.buffer.clear();
        let mut image = self.image.clone();
        let res = self.replay(&mut image, || crash.step(CrashSite::LogRecover).map_err(SimError::Crash));
        if let Err(e) = res {
            // Steps that ran before the crash already touched NVM; they are
            // idempotent so a later recovery starts over from the log.
            self.image = image;
            return Err(e);
        }
        self.image = image;
        self.log.clear();
        self.applied = 0;
        Ok(())
    }

    /// What recovery would produce right now.
    pub fn recovered_image(&self) -> Vec<ObjectImage> {
        let mut image = self.image.clone();
        self.replay(&mut image, || Ok(())).expect("no crash sites");
        image
    }

    pub fn durable_values(&self) -> Vec<Vec<u8>> {
        self.recovered_image().into_iter().map(|o| o.bytes).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::CrashPoint;

    fn v(b: u8) -> Vec<u8> {
        vec![b; 4]
    }

    fn none() -> CrashInjector {
        CrashInjector::new([])
    }

    #[test]
    fn snapshot_toggle_is_the_commit_point() {
        let mut s: SnapshotStore<u32> = SnapshotStore::default();
        assert!(s.latest().is_none());
        s.write(1, 3, 10, &mut none()).unwrap();
        assert_eq!(s.latest().unwrap().content, 1);
        for site in [CrashSite::SnapshotChunk, CrashSite::SnapshotToggle] {
            let mut c = CrashInjector::new([CrashPoint::new(site, 1)]);
            assert!(s.write(2, 3, 20, &mut c).is_err());
            assert_eq!(s.latest().unwrap().content, 1);
            assert_eq!(s.latest().unwrap().taken_at_us, 10);
        }
        s.write(3, 0, 30, &mut none()).unwrap();
        assert_eq!(s.latest().unwrap().content, 3);
        assert_eq!(s.completed(), 2);
    }

    #[test]
    fn committed_markers_survive_and_losers_roll_back() {
        let mut w = WriteAheadLog::new(vec![v(0), v(0)]);
        w.append_commit(TaskId(1), ValidityInterval::new(1, 1), vec![(0, v(1))]);
        let working = [WorkingCopy {
            task: TaskId(2),
            obj: 0,
            value: v(2),
        }];
        w.checkpoint(&working, &mut none()).unwrap();
        assert_eq!(w.take_durable(), vec![TaskId(1)]);
        assert_eq!(w.image()[0].bytes, v(2));
        assert_eq!(w.durable_values(), vec![v(1), v(0)]);
        w.recover(&mut none()).unwrap();
        assert!(w.records().is_empty());
        assert_eq!(w.image()[0], ObjectImage { bytes: v(1), writer: Some(TaskId(1)) });
    }

    #[test]
    fn undo_image_is_the_last_committed_value() {
        let mut w = WriteAheadLog::new(vec![v(0)]);
        w.append_commit(TaskId(1), ValidityInterval::new(1, 1), vec![(0, v(1))]);
        w.checkpoint(&[], &mut none()).unwrap();
        let working = [WorkingCopy { task: TaskId(2), obj: 0, value: v(2) }];
        w.checkpoint(&working, &mut none()).unwrap();
        assert!(w
            .records()
            .iter()
            .any(|r| matches!(r, LogRecord::Undo { before, .. } if *before == v(1))));
        // a later checkpoint of the same task logs no second undo record
        let working = [WorkingCopy { task: TaskId(2), obj: 0, value: v(3) }];
        w.checkpoint(&working, &mut none()).unwrap();
        let undos = w.records().iter().filter(|r| matches!(r, LogRecord::Undo { .. })).count();
        assert_eq!(undos, 1);
        assert_eq!(w.durable_values(), vec![v(1)]);
    }

    #[test]
    fn crashes_anywhere_keep_a_consistent_recovery() {
        let build = || {
            let mut w = WriteAheadLog::new(vec![v(0), v(0)]);
            w.append_commit(TaskId(1), ValidityInterval::new(1, 1), vec![(0, v(1)), (1, v(1))]);
            w
        };
        let working = [WorkingCopy { task: TaskId(2), obj: 1, value: v(2) }];
        let mut clean = build();
        clean.checkpoint(&working, &mut none()).unwrap();
        let flushes = 3;
        for site in [CrashSite::LogFlush, CrashSite::LogApply] {
            for occ in 1..=flushes {
                let mut w = build();
                let mut c = CrashInjector::new([CrashPoint::new(site, occ)]);
                assert!(w.checkpoint(&working, &mut c).is_err());
                let durable = w.take_durable();
                let vals = w.durable_values();
                if durable.is_empty() {
                    assert_eq!(vals, vec![v(0), v(0)], "{site:?} {occ}");
                } else {
                    assert_eq!(vals, vec![v(1), v(1)], "{site:?} {occ}");
                }
                w.recover(&mut none()).unwrap();
                assert_eq!(w.durable_values(), vals);
            }
        }
        let expect = clean.durable_values();
        assert_eq!(expect, vec![v(1), v(1)]);
        for occ in 1.. {
            let mut w = clean.clone();
            let mut c = CrashInjector::new([CrashPoint::new(CrashSite::LogRecover, occ)]);
            if w.recover(&mut c).is_ok() {
                assert!(occ > 1);
                break;
            }
            assert_eq!(w.durable_values(), expect);
            w.recover(&mut none()).unwrap();
            assert_eq!(w.durable_values(), expect);
        }
    }

    #[test]
    fn compaction_keeps_only_running_tasks() {
        let mut w = WriteAheadLog::new(vec![v(0), v(0)]);
        let a = [WorkingCopy { task: TaskId(1), obj: 0, value: v(5) }];
        w.checkpoint(&a, &mut none()).unwrap();
        // task 1 was aborted; task 2 is running and task 3 committed
        w.append_commit(TaskId(3), ValidityInterval::new(2, 2), vec![(1, v(3))]);
        let b = [WorkingCopy { task: TaskId(2), obj: 1, value: v(7) }];
        w.checkpoint(&b, &mut none()).unwrap();
        assert_eq!(w.records().len(), 1);
        assert_eq!(w.image()[0].bytes, v(0));
        assert_eq!(w.image()[1].bytes, v(7));
        assert_eq!(w.durable_values(), vec![v(0), v(3)]);
        w.recover(&mut none()).unwrap();
        assert_eq!(w.image()[1], ObjectImage { bytes: v(3), writer: Some(TaskId(3)) });
    }

    #[test]
    fn power_failure_drops_unflushed_markers() {
        let mut w = WriteAheadLog::new(vec![v(0)]);
        w.append_commit(TaskId(1), ValidityInterval::new(1, 1), vec![(0, v(1))]);
        assert_eq!(w.buffered(), 1);
        w.on_power_failure();
        w.checkpoint(&[], &mut none()).unwrap();
        assert!(w.take_durable().is_empty());
        assert_eq!(w.durable_values(), vec![v(0)]);
    }
}
