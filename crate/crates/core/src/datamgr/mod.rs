//! Two-version concurrency control over shared data objects.
//!
//! Every object has a consistent version (an NVM persistent copy mirrored
//! by an optional VM temporary copy) and each writing task gets its own
//! working copy. Commits are validated backwards against finished tasks
//! and published through a [`CommitMap`].

mod commit_map;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use commit_map::{CommitMap, DEFAULT_MAP_WIDTH};
pub use validate::{ValidationCost, ValidationMode, ValidationStats, ValidityInterval};

use crate::error::{ConfigError, SimError};
use crate::kernel::TaskId;
use crate::memory::{AllocId, Memory, Owner, Purpose, RegionKind};
use crate::sim::{CrashInjector, CrashSite, Timestamp};
use crate::workload::ObjectId;

/// Where committed values live between checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageMode {
    /// Commits publish straight into NVM shadow slots.
    Shadow,
    /// Commits only update VM temporary copies; a checkpointing scheme is
    /// responsible for durability.
    Volatile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub object_count: u16,
    pub object_size: usize,
    pub map_width: usize,
    /// Hex strings; missing entries default to zero bytes.
    pub initial_values: Vec<String>,
    pub validation: ValidationMode,
    /// Also run the full validation at every commit and compare.
    pub cross_check: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            object_count: 5,
            object_size: 64,
            map_width: DEFAULT_MAP_WIDTH,
            initial_values: Vec::new(),
            validation: ValidationMode::ReadMarked,
            cross_check: false,
        }
    }
}

impl DataConfig {
    pub fn initial_value(&self, obj: ObjectId) -> Result<Vec<u8>, ConfigError> {
        let Some(hex_str) = self.initial_values.get(obj as usize) else {
            return Ok(vec![0; self.object_size]);
        };
        let mut v = hex::decode(hex_str.trim())
            .map_err(|e| ConfigError::Invalid(format!("object {obj} initial value: {e}")))?;
        if v.len() > self.object_size {
            return Err(ConfigError::Invalid(format!(
                "object {obj} initial value has {} bytes, object size is {}",
                v.len(),
                self.object_size
            )));
        }
        v.resize(self.object_size, 0);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitEntry {
    pub task: TaskId,
    pub interval: ValidityInterval,
    /// Operation sequence number of the publication.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataObject {
    pub id: ObjectId,
    /// Both persistent slots, owned for the lifetime of the object.
    pub slots: [AllocId; 2],
    pub interval: ValidityInterval,
    /// Committer of the current version; `None` for the initial value.
    pub writer: Option<TaskId>,
    pub history: Vec<CommitEntry>,
    /// Largest begin among finished tasks that read the current version.
    pub read_mark: Option<i64>,
    pub temp: Option<AllocId>,
}

impl DataObject {
    pub fn first_commit_after(&self, seq: u64) -> Option<&CommitEntry> {
        let i = self.history.partition_point(|e| e.seq <= seq);
        self.history.get(i)
    }

    pub fn last_commit_after(&self, seq: u64) -> Option<&CommitEntry> {
        self.history.last().filter(|e| e.seq > seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadAction {
    pub obj: ObjectId,
    pub seq: u64,
    pub snapshot: ValidityInterval,
    pub version: Option<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteAction {
    pub obj: ObjectId,
    pub seq: u64,
    pub snapshot: ValidityInterval,
}

/// All reads of one object by one task, folded together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadEntry {
    pub first_seq: u64,
    pub max_begin: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteEntry {
    pub seq: u64,
    pub snapshot: ValidityInterval,
    pub copy: AllocId,
}

/// Per-task concurrency-control state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTxn {
    pub task: TaskId,
    pub lengthy: bool,
    pub start_seq: u64,
    pub start_finished: u64,
    pub read_log: Vec<ReadAction>,
    pub write_log: Vec<WriteAction>,
    pub reads: BTreeMap<ObjectId, ReadEntry>,
    pub writes: BTreeMap<ObjectId, WriteEntry>,
    /// Interval narrowed by the read-side rules as execution goes on.
    pub running: ValidityInterval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub value: Vec<u8>,
    /// The task's interval became empty.
    pub early_abort: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub task: TaskId,
    pub interval: ValidityInterval,
    pub commit_seq: u64,
    pub lengthy: bool,
    /// Distinct (object, version writer) pairs read from the consistent version.
    pub reads: Vec<(ObjectId, Option<TaskId>)>,
    pub writes: Vec<(ObjectId, Vec<u8>)>,
    pub cost: ValidationCost,
    /// Other tasks whose interval this commit emptied.
    pub early_aborted: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed(CommitRecord),
    Aborted { interval: ValidityInterval },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataManager {
    mode: StorageMode,
    validation: ValidationMode,
    cross_check: bool,
    object_size: usize,
    objects: Vec<DataObject>,
    map: CommitMap,
    txns: BTreeMap<TaskId, TaskTxn>,
    op_seq: u64,
    commit_seq: u64,
    finished_total: u64,
    pub full_stats: ValidationStats,
    pub commit_stats: ValidationStats,
    /// Commits where incremental and full validation disagreed.
    pub cross_check_mismatches: u64,
}

impl DataManager {
    pub fn new(mem: &mut Memory, cfg: &DataConfig, mode: StorageMode) -> Result<Self, SimError> {
        let count = cfg.object_count as usize;
        if count > cfg.map_width {
            return Err(ConfigError::TooManyObjects {
                count,
                width: cfg.map_width,
            }
            .into());
        }
        if cfg.object_size == 0 {
            return Err(ConfigError::Invalid("object size must be positive".into()).into());
        }
        let mut objects = Vec::with_capacity(count);
        for o in 0..cfg.object_count {
            let init = cfg.initial_value(o)?;
            let s0 = mem.allocate_with(RegionKind::Nvm, Owner::Object(o), Purpose::PersistentCopy, &init)?;
            let s1 = mem.allocate_with(RegionKind::Nvm, Owner::Object(o), Purpose::PersistentCopy, &init)?;
            let temp = match mode {
                StorageMode::Shadow => None,
                StorageMode::Volatile => {
                    Some(mem.allocate_with(RegionKind::Vm, Owner::Object(o), Purpose::TemporaryCopy, &init)?)
                }
            };
            objects.push(DataObject {
                id: o,
                slots: [s0, s1],
                interval: ValidityInterval::INITIAL,
                writer: None,
                history: Vec::new(),
                read_mark: None,
                temp,
            });
        }
        let map = CommitMap::new(
            cfg.map_width,
            objects.iter().map(|o| o.slots[0]).collect(),
            objects.iter().map(|o| o.slots[1]).collect(),
        )?;
        Ok(Self {
            mode,
            validation: cfg.validation,
            cross_check: cfg.cross_check,
            object_size: cfg.object_size,
            objects,
            map,
            txns: BTreeMap::new(),
            op_seq: 0,
            commit_seq: 0,
            finished_total: 0,
            full_stats: ValidationStats::default(),
            commit_stats: ValidationStats::default(),
            cross_check_mismatches: 0,
        })
    }

    pub fn mode(&self) -> StorageMode {
        self.mode
    }

    pub fn object_size(&self) -> usize {
        self.object_size
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn object(&self, obj: ObjectId) -> &DataObject {
        &self.objects[obj as usize]
    }

    pub fn objects(&self) -> &[DataObject] {
        &self.objects
    }

    pub fn commit_map(&self) -> &CommitMap {
        &self.map
    }

    pub fn txn(&self, task: TaskId) -> Option<&TaskTxn> {
        self.txns.get(&task)
    }

    pub fn txns(&self) -> impl Iterator<Item = &TaskTxn> {
        self.txns.values()
    }

    pub fn finished_total(&self) -> u64 {
        self.finished_total
    }

    pub fn commit_seq(&self) -> u64 {
        self.commit_seq
    }

    /// Opens (or reopens) the transaction of `task`.
    pub fn begin(&mut self, mem: &mut Memory, task: TaskId, lengthy: bool) {
        self.abort(mem, task);
        self.txns.insert(
            task,
            TaskTxn {
                task,
                lengthy,
                start_seq: self.op_seq,
                start_finished: self.finished_total,
                read_log: Vec::new(),
                write_log: Vec::new(),
                reads: BTreeMap::new(),
                writes: BTreeMap::new(),
                running: ValidityInterval::open(),
            },
        );
    }

    fn txn_mut(&mut self, task: TaskId) -> Result<&mut TaskTxn, SimError> {
        self.txns
            .get_mut(&task)
            .ok_or_else(|| SimError::Logic(format!("{task} has no open transaction")))
    }

    fn check_obj(&self, obj: ObjectId) -> Result<(), SimError> {
        if (obj as usize) < self.objects.len() {
            Ok(())
        } else {
            Err(SimError::Logic(format!("object {obj} is not registered")))
        }
    }

    /// The persistent copy currently selected by the bit map.
    pub fn persistent_value(&self, mem: &Memory, obj: ObjectId) -> Result<Vec<u8>, SimError> {
        Ok(mem.read(self.map.current(obj))?.to_vec())
    }

    /// The consistent version as tasks would see it.
    pub fn consistent_value(&self, mem: &Memory, obj: ObjectId) -> Result<Vec<u8>, SimError> {
        match self.objects[obj as usize].temp.filter(|t| mem.contains(*t)) {
            Some(t) => Ok(mem.read(t)?.to_vec()),
            None => self.persistent_value(mem, obj),
        }
    }

    pub fn read(&mut self, mem: &mut Memory, task: TaskId, obj: ObjectId) -> Result<ReadResult, SimError> {
        self.check_obj(obj)?;
        let own = self.txn_mut(task)?.writes.get(&obj).map(|w| w.copy);
        if let Some(copy) = own {
            return Ok(ReadResult {
                value: mem.read(copy)?.to_vec(),
                early_abort: false,
            });
        }
        let o = &self.objects[obj as usize];
        let value = match o.temp.filter(|t| mem.contains(*t)) {
            Some(t) => mem.read(t)?.to_vec(),
            None => {
                let v = mem.read(self.map.current(obj))?.to_vec();
                // refresh the VM mirror when there is room for it
                let temp = mem
                    .allocate_with(RegionKind::Vm, Owner::Object(obj), Purpose::TemporaryCopy, &v)
                    .ok();
                self.objects[obj as usize].temp = temp;
                v
            }
        };
        self.op_seq += 1;
        let seq = self.op_seq;
        let o = &self.objects[obj as usize];
        let action = ReadAction {
            obj,
            seq,
            snapshot: o.interval,
            version: o.writer,
        };
        let txn = self.txn_mut(task)?;
        txn.read_log.push(action);
        let e = txn.reads.entry(obj).or_insert(ReadEntry {
            first_seq: seq,
            max_begin: action.snapshot.begin,
        });
        e.max_begin = e.max_begin.max(action.snapshot.begin);
        txn.running.begin = txn.running.begin.max(action.snapshot.begin + 1);
        Ok(ReadResult {
            value,
            early_abort: !txn.running.is_valid(),
        })
    }

    pub fn write(&mut self, mem: &mut Memory, task: TaskId, obj: ObjectId, value: &[u8]) -> Result<(), SimError> {
        self.check_obj(obj)?;
        if value.len() != self.object_size {
            return Err(SimError::Logic(format!(
                "write of {} bytes to a {}-byte object",
                value.len(),
                self.object_size
            )));
        }
        let txn = self.txn_mut(task)?;
        if let Some(w) = txn.writes.get(&obj) {
            mem.write(w.copy, value)?;
            return Ok(());
        }
        let region = if txn.lengthy { RegionKind::Nvm } else { RegionKind::Vm };
        let copy = mem.allocate_with(region, Owner::Task(task), Purpose::WorkingCopy, value)?;
        self.op_seq += 1;
        let seq = self.op_seq;
        let snapshot = self.objects[obj as usize].interval;
        let txn = self.txn_mut(task)?;
        txn.write_log.push(WriteAction { obj, seq, snapshot });
        txn.writes.insert(obj, WriteEntry { seq, snapshot, copy });
        Ok(())
    }

    /// Whether the task's running interval is still non-empty.
    pub fn early_abort_check(&self, task: TaskId) -> bool {
        self.txns.get(&task).is_none_or(|t| t.running.is_valid())
    }

    fn cost(&self, txn: &TaskTxn, comparisons: u64) -> ValidationCost {
        ValidationCost {
            comparisons,
            n: (txn.reads.len() + txn.writes.len()) as u64,
            m: self.finished_total - txn.start_finished,
        }
    }

    /// Full backward validation of `task` at timestamp `now`.
    pub fn validate(&mut self, task: TaskId, now: Timestamp) -> Option<ValidityInterval> {
        let txn = self.txns.get(&task)?;
        let (iv, cmp) = validate::full_validation(&self.objects, txn, now, self.validation);
        let cost = self.cost(txn, cmp);
        self.full_stats.record(cost);
        Some(iv)
    }

    /// Validates and, if the interval is non-empty, publishes the task's
    /// working copies. A crash injected inside the commit surfaces as
    /// [`SimError::Crash`] with no published effect.
    pub fn commit(
        &mut self,
        mem: &mut Memory,
        task: TaskId,
        now: Timestamp,
        crash: &mut CrashInjector,
    ) -> Result<CommitOutcome, SimError> {
        let txn = self
            .txns
            .get(&task)
            .ok_or_else(|| SimError::Logic(format!("{task} commits without a transaction")))?;
        let (iv, cmp) = validate::commit_validation(&self.objects, txn, now, self.validation);
        let cost = self.cost(txn, cmp);
        self.commit_stats.record(cost);
        if self.cross_check {
            let full = self.validate(task, now).expect("transaction exists");
            if full != iv {
                self.cross_check_mismatches += 1;
            }
        }
        if !iv.is_valid() {
            self.abort(mem, task);
            return Ok(CommitOutcome::Aborted { interval: iv });
        }
        let txn = &self.txns[&task];
        let lengthy = txn.lengthy;
        let writes: Vec<(ObjectId, AllocId)> = txn.writes.iter().map(|(o, w)| (*o, w.copy)).collect();
        if self.mode == StorageMode::Shadow {
            if !lengthy {
                for &(o, copy) in &writes {
                    crash.step(CrashSite::ShadowCopy).map_err(SimError::Crash)?;
                    let spare = self.objects[o as usize].slots[self.map.spare_index(o)];
                    let bytes = mem.read(copy)?.to_vec();
                    mem.write(spare, &bytes)?;
                }
            }
            for &(o, copy) in &writes {
                crash.step(CrashSite::AddressMapWrite).map_err(SimError::Crash)?;
                let target = if lengthy {
                    copy
                } else {
                    self.objects[o as usize].slots[self.map.spare_index(o)]
                };
                self.map.write_spare(o, target);
            }
            crash.step(CrashSite::BitmapToggle).map_err(SimError::Crash)?;
            let objs: Vec<ObjectId> = writes.iter().map(|w| w.0).collect();
            self.map.toggle(&objs)?;
        }
        let mut record = self.publish(mem, task, iv)?;
        record.cost = cost;
        Ok(CommitOutcome::Committed(record))
    }

    /// Everything that becomes visible together with the bit-map toggle.
    fn publish(&mut self, mem: &mut Memory, task: TaskId, iv: ValidityInterval) -> Result<CommitRecord, SimError> {
        let txn = self.txns.remove(&task).expect("transaction exists");
        self.op_seq += 1;
        let seq = self.op_seq;
        self.commit_seq += 1;
        self.finished_total += 1;

        for (&o, r) in &txn.reads {
            if txn.writes.contains_key(&o) {
                continue;
            }
            let obj = &mut self.objects[o as usize];
            if obj.first_commit_after(r.first_seq).is_none() {
                obj.read_mark = Some(obj.read_mark.map_or(iv.begin, |m| m.max(iv.begin)));
            }
        }

        let mut written = Vec::with_capacity(txn.writes.len());
        for (&o, w) in &txn.writes {
            let value = mem.read(w.copy)?.to_vec();
            let obj = &mut self.objects[o as usize];
            obj.history.push(CommitEntry { task, interval: iv, seq });
            obj.interval = iv;
            obj.writer = Some(task);
            obj.read_mark = None;
            let old_temp = obj.temp.take();
            if let Some(t) = old_temp.filter(|t| mem.contains(*t)) {
                mem.free(t)?;
            }
            match (self.mode, txn.lengthy) {
                (StorageMode::Shadow, true) => {
                    let cur = self.map.bit(o);
                    let superseded = obj.slots[cur];
                    if superseded != w.copy {
                        mem.free(superseded)?;
                    }
                    obj.slots[cur] = w.copy;
                    mem.retag(w.copy, Owner::Object(o), Purpose::PersistentCopy)?;
                }
                (StorageMode::Shadow, false) | (StorageMode::Volatile, _) => {
                    mem.retag(w.copy, Owner::Object(o), Purpose::TemporaryCopy)?;
                    obj.temp = Some(w.copy);
                }
            }
            written.push((o, value));
        }

        let mut early_aborted = Vec::new();
        for other in self.txns.values_mut() {
            let mut hit = false;
            for &(o, _) in &written {
                if other.reads.contains_key(&o) {
                    other.running.end = other.running.end.min(iv.begin - 1);
                    hit = true;
                }
            }
            if hit && !other.running.is_valid() {
                early_aborted.push(other.task);
            }
        }

        let mut reads: Vec<(ObjectId, Option<TaskId>)> = txn.read_log.iter().map(|r| (r.obj, r.version)).collect();
        reads.sort();
        reads.dedup();
        self.prune_history();
        Ok(CommitRecord {
            task,
            interval: iv,
            commit_seq: self.commit_seq,
            lengthy: txn.lengthy,
            reads,
            writes: written,
            cost: ValidationCost::default(),
            early_aborted,
        })
    }

    /// Discards the task's transaction and its working copies.
    pub fn abort(&mut self, mem: &mut Memory, task: TaskId) {
        if let Some(txn) = self.txns.remove(&task) {
            for w in txn.writes.values() {
                if mem.contains(w.copy) {
                    let _ = mem.free(w.copy);
                }
            }
            self.prune_history();
        }
    }

    /// Keeps only history a live transaction can still refer to.
    fn prune_history(&mut self) {
        let horizon = self.txns.values().map(|t| t.start_seq).min();
        for o in &mut self.objects {
            match horizon {
                Some(h) => o.history.retain(|e| e.seq > h),
                None => o.history.clear(),
            }
        }
    }

    /// VM contents are gone: temporary copies are invalid and the
    /// transactions of dropped tasks vanish with their working copies.
    pub fn on_power_failure(&mut self, lost: &[TaskId]) {
        for o in &mut self.objects {
            o.temp = None;
        }
        for t in lost {
            self.txns.remove(t);
        }
        let vm_txns: Vec<TaskId> = self.txns.values().filter(|t| !t.lengthy).map(|t| t.task).collect();
        for t in vm_txns {
            self.txns.remove(&t);
        }
        self.prune_history();
    }

    /// Reinstalls committed values after a checkpointing scheme rebuilt
    /// them, ordering every later task after `now`.
    pub fn reset_committed(
        &mut self,
        mem: &mut Memory,
        values: &[(Vec<u8>, Option<TaskId>)],
        now: Timestamp,
    ) -> Result<(), SimError> {
        let ids: Vec<TaskId> = self.txns.keys().copied().collect();
        for t in ids {
            self.abort(mem, t);
        }
        for (o, (bytes, writer)) in self.objects.iter_mut().zip(values) {
            if let Some(t) = o.temp.take().filter(|t| mem.contains(*t)) {
                mem.free(t)?;
            }
            o.temp = Some(mem.allocate_with(RegionKind::Vm, Owner::Object(o.id), Purpose::TemporaryCopy, bytes)?);
            o.interval = ValidityInterval::new(now as i64, now as i64);
            o.writer = *writer;
            o.read_mark = None;
            o.history.clear();
        }
        Ok(())
    }
}
