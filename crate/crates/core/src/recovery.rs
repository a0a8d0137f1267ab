//! Persisted task records, finished marks, instant recovery and lengthy
//! task handling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamgr::DataManager;
use crate::error::{ConfigError, SimError};
use crate::kernel::{Kernel, TaskAttributes, TaskId, TaskStatus};
use crate::memory::{AllocId, Memory, MemoryError, Owner, Purpose, RegionKind};
use crate::sim::{Micros, SimClock};

pub const RECORD_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryCosts {
    pub base_us: Micros,
    pub per_task_us: Micros,
}

impl Default for RecoveryCosts {
    fn default() -> Self {
        Self {
            base_us: 100,
            per_task_us: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub id: TaskId,
    pub attrs: TaskAttributes,
    pub lengthy: bool,
    pub ever_rerun_due_to_power_failure: bool,
    /// Stack of a lengthy task, kept in NVM.
    pub nvm_context: Option<AllocId>,
    pub context_valid: bool,
    pub finished: bool,
    metadata: AllocId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub duration_us: Micros,
    pub recreated: Vec<TaskId>,
    pub resumed: Vec<TaskId>,
    pub became_lengthy: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryHandler {
    records: BTreeMap<TaskId, TaskRecord>,
    lv_flag: bool,
    costs: RecoveryCosts,
    detect_lengthy: bool,
}

impl RecoveryHandler {
    /// `detect_lengthy = false` gives the recreate-always behaviour.
    pub fn new(costs: RecoveryCosts, detect_lengthy: bool) -> Self {
        Self {
            records: BTreeMap::new(),
            lv_flag: false,
            costs,
            detect_lengthy,
        }
    }

    pub fn record(&self, id: TaskId) -> Option<&TaskRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.values()
    }

    pub fn unfinished(&self) -> usize {
        self.records.values().filter(|r| !r.finished).count()
    }

    pub fn lv_flag(&self) -> bool {
        self.lv_flag
    }

    pub fn record_task_created(
        &mut self,
        mem: &mut Memory,
        id: TaskId,
        attrs: &TaskAttributes,
        lengthy: bool,
    ) -> Result<(), SimError> {
        if let Some(r) = self.records.get_mut(&id) {
            r.lengthy |= lengthy;
            return Ok(());
        }
        let metadata = mem
            .allocate(RegionKind::Nvm, RECORD_BYTES, Owner::Task(id), Purpose::Metadata)
            .map_err(|e| match e {
                MemoryError::OutOfMemory { .. } => {
                    SimError::Config(ConfigError::Invalid(format!("no NVM left for the record of {id}: {e}")))
                }
                other => other.into(),
            })?;
        self.records.insert(
            id,
            TaskRecord {
                id,
                attrs: attrs.clone(),
                lengthy,
                ever_rerun_due_to_power_failure: false,
                nvm_context: None,
                context_valid: true,
                finished: false,
                metadata,
            },
        );
        Ok(())
    }

    pub fn mark_finished(&mut self, id: TaskId) {
        if let Some(r) = self.records.get_mut(&id) {
            r.finished = true;
            r.attrs.finished = true;
        }
    }

    /// Drops finished records and their metadata.
    pub fn collect_finished(&mut self, mem: &mut Memory) {
        let done: Vec<TaskId> = self.records.values().filter(|r| r.finished).map(|r| r.id).collect();
        for id in done {
            if let Some(r) = self.records.remove(&id) {
                let _ = mem.free(r.metadata);
            }
        }
    }

    /// Decides lengthiness for a record about to be rerun after a power
    /// failure: the second consecutive rerun makes it lengthy for good.
    pub fn detect_lengthy(record: &mut TaskRecord) -> bool {
        if record.lengthy {
            return true;
        }
        if record.ever_rerun_due_to_power_failure {
            record.lengthy = true;
        } else {
            record.ever_rerun_due_to_power_failure = true;
        }
        record.lengthy
    }

    /// Captures which lengthy contexts are still usable. Call after the
    /// kernel has processed the failure.
    pub fn on_power_failure(&mut self, kernel: &Kernel) {
        self.lv_flag = false;
        for r in self.records.values_mut() {
            match kernel.task(r.id) {
                Some(t) if t.lengthy => {
                    r.nvm_context = Some(t.stack);
                    r.context_valid = t.context_valid;
                }
                _ => {
                    r.nvm_context = None;
                    r.context_valid = false;
                }
            }
        }
    }

    pub fn recovery_cost_us(&self) -> Micros {
        self.costs.base_us + self.costs.per_task_us * self.unfinished() as u64
    }

    /// Re-adds lengthy tasks with intact contexts and recreates every other
    /// unfinished task from its attributes. `work_us(code_ref, lengthy)`
    /// gives the execution time of a fresh task.
    pub fn on_power_resume(
        &mut self,
        kernel: &mut Kernel,
        mem: &mut Memory,
        dm: &mut DataManager,
        clock: &SimClock,
        work_us: &dyn Fn(usize, bool) -> Micros,
    ) -> Result<RecoveryReport, SimError> {
        self.lv_flag = false;
        let mut report = RecoveryReport {
            duration_us: self.recovery_cost_us(),
            ..RecoveryReport::default()
        };
        for r in self.records.values_mut().filter(|r| !r.finished) {
            let was_lengthy = r.lengthy;
            let lengthy = if self.detect_lengthy {
                Self::detect_lengthy(r)
            } else {
                false
            };
            if lengthy && !was_lengthy {
                report.became_lengthy.push(r.id);
            }
            let intact = kernel
                .task(r.id)
                .is_some_and(|t| t.lengthy && t.context_valid && t.status != TaskStatus::Finished);
            if lengthy && intact {
                kernel.resume_task(r.id)?;
                report.resumed.push(r.id);
            } else {
                dm.abort(mem, r.id);
                kernel.recreate_task(mem, clock, r.id, r.attrs.clone(), lengthy, work_us(r.attrs.code_ref, lengthy))?;
                if let Some(t) = kernel.task_mut(r.id) {
                    t.rerun_due_to_power_failure = true;
                }
                dm.begin(mem, r.id, lengthy);
                r.context_valid = true;
                report.recreated.push(r.id);
            }
        }
        Ok(report)
    }

    pub fn on_low_voltage(&mut self) {
        self.lv_flag = true;
    }

    /// Energy recovered without a failure: clears the flag and makes the
    /// suspended lengthy tasks ready again.
    pub fn clear_low_voltage(&mut self, kernel: &mut Kernel) -> Result<Vec<TaskId>, SimError> {
        self.lv_flag = false;
        let targets: Vec<TaskId> = kernel
            .tasks()
            .filter(|t| t.lengthy && t.status == TaskStatus::Suspended)
            .map(|t| t.id)
            .collect();
        for id in &targets {
            kernel.resume_task(*id)?;
        }
        Ok(targets)
    }

    /// With the low-voltage flag set, suspends every lengthy task. Call
    /// after the outgoing task has been switched out.
    pub fn on_context_switch_at_low_voltage(&mut self, kernel: &mut Kernel) -> Result<Vec<TaskId>, SimError> {
        if !self.lv_flag {
            return Ok(Vec::new());
        }
        let targets: Vec<TaskId> = kernel
            .tasks()
            .filter(|t| t.lengthy && matches!(t.status, TaskStatus::Ready | TaskStatus::Running))
            .map(|t| t.id)
            .collect();
        for id in &targets {
            kernel.suspend_task(*id)?;
        }
        Ok(targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamgr::{DataConfig, StorageMode};
    use crate::memory::MemoryConfig;

    struct Env {
        rec: RecoveryHandler,
        kernel: Kernel,
        mem: Memory,
        dm: DataManager,
        clock: SimClock,
    }

    fn env(detect: bool) -> Env {
        let mut mem = Memory::new(&MemoryConfig::default());
        let dm = DataManager::new(&mut mem, &DataConfig::default(), StorageMode::Shadow).unwrap();
        Env {
            rec: RecoveryHandler::new(RecoveryCosts::default(), detect),
            kernel: Kernel::new(),
            mem,
            dm,
            clock: SimClock::new(1000),
        }
    }

    fn work(_: usize, lengthy: bool) -> Micros {
        if lengthy {
            10_700
        } else {
            10_000
        }
    }

    impl Env {
        fn spawn(&mut self, name: &str, lengthy: bool) -> TaskId {
            let attrs = TaskAttributes {
                code_ref: 0,
                name: name.into(),
                stack_size: 128,
                priority: 1,
                finished: false,
            };
            let id = self
                .kernel
                .create_task(&mut self.mem, &self.clock, attrs.clone(), lengthy, work(0, lengthy))
                .unwrap();
            self.rec.record_task_created(&mut self.mem, id, &attrs, lengthy).unwrap();
            self.dm.begin(&mut self.mem, id, lengthy);
            id
        }

        fn fail(&mut self) {
            self.mem.on_power_failure();
            let lost = self.kernel.on_power_failure();
            self.dm.on_power_failure(&lost);
            self.rec.on_power_failure(&self.kernel);
        }

        fn resume(&mut self) -> RecoveryReport {
            self.rec
                .on_power_resume(&mut self.kernel, &mut self.mem, &mut self.dm, &self.clock, &work)
                .unwrap()
        }
    }

    #[test]
    fn record_survives_immediate_failure() {
        let mut e = env(true);
        let a = e.spawn("a", false);
        e.fail();
        assert!(e.rec.record(a).is_some());
        assert!(e.kernel.task(a).is_none());
        e.mem.check_accounting().unwrap();
    }

    #[test]
    fn unfinished_tasks_are_recreated_from_zero() {
        let mut e = env(true);
        let a = e.spawn("a", false);
        let b = e.spawn("b", false);
        let c = e.spawn("c", false);
        e.rec.mark_finished(c);
        e.rec.mark_finished(c);
        e.kernel.schedule_next(&mut e.clock);
        e.kernel.task_mut(a).unwrap().advance(5_000);
        e.fail();
        let r = e.resume();
        assert_eq!(r.recreated, vec![a, b]);
        assert!(r.resumed.is_empty());
        assert_eq!(r.duration_us, 300);
        for id in [a, b] {
            let t = e.kernel.task(id).unwrap();
            assert_eq!(t.done_work_us, 0);
            assert!(!t.lengthy);
        }
        assert!(e.kernel.task(c).is_none());
    }

    #[test]
    fn lengthy_task_with_saved_context_resumes_in_place() {
        let mut e = env(true);
        let a = e.spawn("a", true);
        e.kernel.schedule_next(&mut e.clock);
        e.kernel.task_mut(a).unwrap().advance(6_420);
        e.kernel.switch_out();
        e.fail();
        assert!(e.rec.record(a).unwrap().context_valid);
        let r = e.resume();
        assert_eq!(r.resumed, vec![a]);
        let t = e.kernel.task(a).unwrap();
        assert!((t.progress() - 0.6).abs() < 1e-9);
        assert_eq!(e.kernel.ready_queue().collect::<Vec<_>>(), vec![a]);
    }

    #[test]
    fn empty_recovery_costs_base_only() {
        let mut e = env(true);
        let r = e.resume();
        assert_eq!(r, RecoveryReport { duration_us: 100, ..RecoveryReport::default() });
    }

    #[test]
    fn five_unfinished_tasks_cost_six_tenths_of_a_millisecond() {
        let mut e = env(true);
        for i in 0..5 {
            e.spawn(&format!("t{i}"), false);
        }
        assert_eq!(e.rec.recovery_cost_us(), 600);
    }

    #[test]
    fn second_consecutive_power_rerun_turns_lengthy() {
        let mut e = env(true);
        let a = e.spawn("a", false);
        e.fail();
        let r = e.resume();
        assert!(r.became_lengthy.is_empty());
        assert!(e.rec.record(a).unwrap().ever_rerun_due_to_power_failure);
        e.fail();
        let r = e.resume();
        assert_eq!(r.became_lengthy, vec![a]);
        let t = e.kernel.task(a).unwrap();
        assert!(t.lengthy);
        assert_eq!(t.region, RegionKind::Nvm);
        assert_eq!(t.total_work_us, 10_700);
        assert_eq!(e.mem.get(t.stack).unwrap().region, RegionKind::Nvm);
    }

    #[test]
    fn recreate_always_never_turns_lengthy() {
        let mut e = env(false);
        let a = e.spawn("a", false);
        for _ in 0..4 {
            e.fail();
            e.resume();
        }
        assert!(!e.kernel.task(a).unwrap().lengthy);
    }

    #[test]
    fn validation_aborts_do_not_count_as_reruns() {
        let mut e = env(true);
        let a = e.spawn("a", false);
        for _ in 0..3 {
            // what the runtime does after a failed validation
            e.dm.abort(&mut e.mem, a);
            let attrs = e.rec.record(a).unwrap().attrs.clone();
            e.kernel
                .recreate_task(&mut e.mem, &e.clock, a, attrs, false, 10_000)
                .unwrap();
        }
        assert!(!e.rec.record(a).unwrap().ever_rerun_due_to_power_failure);
        e.fail();
        assert!(e.resume().became_lengthy.is_empty());
    }

    #[test]
    fn low_voltage_suspends_lengthy_after_switch_out() {
        let mut e = env(true);
        let long = e.spawn("long", true);
        let short = e.spawn("short", false);
        e.kernel.schedule_next(&mut e.clock);
        assert_eq!(e.kernel.current(), Some(long));
        e.rec.on_low_voltage();
        e.kernel.switch_out();
        let s = e.rec.on_context_switch_at_low_voltage(&mut e.kernel).unwrap();
        assert_eq!(s, vec![long]);
        assert!(e.kernel.task(long).unwrap().context_valid);
        let picks: Vec<_> = (0..3).map(|_| e.kernel.schedule_next(&mut e.clock)).collect();
        assert!(picks.iter().all(|p| *p == Some(short)));
        e.fail();
        assert_eq!(e.resume().resumed, vec![long]);
    }

    #[test]
    fn clearing_low_voltage_resumes_suspended_lengthy() {
        let mut e = env(true);
        let long = e.spawn("long", true);
        e.rec.on_low_voltage();
        e.rec.on_context_switch_at_low_voltage(&mut e.kernel).unwrap();
        assert_eq!(e.kernel.schedule_next(&mut e.clock), None);
        assert_eq!(e.rec.clear_low_voltage(&mut e.kernel).unwrap(), vec![long]);
        assert!(!e.rec.lv_flag());
        assert_eq!(e.kernel.schedule_next(&mut e.clock), Some(long));
    }

    #[test]
    fn low_voltage_with_only_short_tasks_suspends_nothing() {
        let mut e = env(true);
        e.spawn("short", false);
        e.rec.on_low_voltage();
        assert!(e.rec.on_context_switch_at_low_voltage(&mut e.kernel).unwrap().is_empty());
    }

    #[test]
    fn failure_before_enforced_switch_recreates_lengthy() {
        let mut e = env(true);
        let long = e.spawn("long", true);
        e.kernel.schedule_next(&mut e.clock);
        e.kernel.task_mut(long).unwrap().advance(5_000);
        e.rec.on_low_voltage();
        e.fail();
        assert!(!e.rec.record(long).unwrap().context_valid);
        let r = e.resume();
        assert_eq!(r.recreated, vec![long]);
        let t = e.kernel.task(long).unwrap();
        assert!(t.lengthy);
        assert_eq!(t.done_work_us, 0);
        e.mem.check_accounting().unwrap();
    }

    #[test]
    fn finished_records_are_collected() {
        let mut e = env(true);
        let a = e.spawn("a", false);
        let before = e.mem.region(RegionKind::Nvm).used_bytes;
        e.rec.mark_finished(a);
        e.rec.collect_finished(&mut e.mem);
        assert!(e.rec.record(a).is_none());
        assert_eq!(e.mem.region(RegionKind::Nvm).used_bytes, before - RECORD_BYTES);
    }
}
