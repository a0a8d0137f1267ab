//! Task control blocks and a round-robin scheduler.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::memory::{AllocId, Memory, MemoryError, Owner, Purpose, RegionKind};
use crate::sim::{Micros, SimClock, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Ready,
    Running,
    Suspended,
    Finished,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAttributes {
    /// Index of the workload this task executes.
    pub code_ref: usize,
    pub name: String,
    pub stack_size: usize,
    pub priority: u8,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub attrs: TaskAttributes,
    pub status: TaskStatus,
    pub lengthy: bool,
    pub region: RegionKind,
    pub total_work_us: Micros,
    pub done_work_us: Micros,
    /// Index of the next script step to execute.
    pub next_step: usize,
    pub stack: AllocId,
    /// Register context saved by the scheduler and not yet overwritten.
    pub context_valid: bool,
    pub rerun_due_to_power_failure: bool,
    pub read_digest: [u8; 32],
    pub write_count: u32,
    pub created_ctx: Timestamp,
}

impl Task {
    pub fn remaining_work_us(&self) -> Micros {
        self.total_work_us - self.done_work_us
    }

    pub fn progress(&self) -> f64 {
        self.done_work_us as f64 / self.total_work_us.max(1) as f64
    }

    pub fn advance(&mut self, dt_us: Micros) {
        self.done_work_us = (self.done_work_us + dt_us).min(self.total_work_us);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Kernel {
    tasks: BTreeMap<TaskId, Task>,
    ready: VecDeque<TaskId>,
    current: Option<TaskId>,
    next_id: u32,
}

impl Kernel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    pub fn task_mut(&mut self, id: TaskId) -> Option<&mut Task> {
        self.tasks.get_mut(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn current(&self) -> Option<TaskId> {
        self.current
    }

    pub fn ready_queue(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.ready.iter().copied()
    }

    /// Highest id handed out so far.
    pub fn id_watermark(&self) -> u32 {
        self.next_id
    }

    /// Never hand out ids at or below `floor` again.
    pub fn reserve_ids(&mut self, floor: u32) {
        self.next_id = self.next_id.max(floor);
    }

    pub fn fresh_id(&mut self) -> TaskId {
        self.next_id += 1;
        TaskId(self.next_id)
    }

    /// Creates a task under a fresh id and makes it ready.
    pub fn create_task(
        &mut self,
        mem: &mut Memory,
        clock: &SimClock,
        attrs: TaskAttributes,
        lengthy: bool,
        total_work_us: Micros,
    ) -> Result<TaskId, MemoryError> {
        let id = self.fresh_id();
        self.recreate_task(mem, clock, id, attrs, lengthy, total_work_us)?;
        Ok(id)
    }

    /// Creates a task under a known id; progress starts from zero.
    pub fn recreate_task(
        &mut self,
        mem: &mut Memory,
        clock: &SimClock,
        id: TaskId,
        attrs: TaskAttributes,
        lengthy: bool,
        total_work_us: Micros,
    ) -> Result<(), MemoryError> {
        if self.tasks.contains_key(&id) {
            self.delete_task(mem, id);
        }
        let region = if lengthy { RegionKind::Nvm } else { RegionKind::Vm };
        let stack = mem.allocate(region, attrs.stack_size, Owner::Task(id), Purpose::Stack)?;
        self.next_id = self.next_id.max(id.0);
        self.tasks.insert(
            id,
            Task {
                id,
                attrs,
                status: TaskStatus::Ready,
                lengthy,
                region,
                total_work_us,
                done_work_us: 0,
                next_step: 0,
                stack,
                context_valid: true,
                rerun_due_to_power_failure: false,
                read_digest: [0; 32],
                write_count: 0,
                created_ctx: clock.ctx_switch_count(),
            },
        );
        self.ready.push_back(id);
        Ok(())
    }

    /// Removes a task and releases its stack.
    pub fn delete_task(&mut self, mem: &mut Memory, id: TaskId) -> Option<Task> {
        let t = self.tasks.remove(&id)?;
        self.ready.retain(|x| *x != id);
        if self.current == Some(id) {
            self.current = None;
        }
        if mem.contains(t.stack) {
            let _ = mem.free(t.stack);
        }
        Some(t)
    }

    /// Switches out the running task and picks the next ready one.
    pub fn schedule_next(&mut self, clock: &mut SimClock) -> Option<TaskId> {
        clock.context_switch();
        self.switch_out();
        let next = self.ready.pop_front()?;
        let t = self.tasks.get_mut(&next).expect("ready task exists");
        t.status = TaskStatus::Running;
        t.context_valid = false;
        self.current = Some(next);
        Some(next)
    }

    /// Saves the running task's context and puts it back in the queue.
    pub fn switch_out(&mut self) -> Option<TaskId> {
        let id = self.current.take()?;
        let t = self.tasks.get_mut(&id)?;
        t.context_valid = true;
        if t.status == TaskStatus::Running {
            t.status = TaskStatus::Ready;
            self.ready.push_back(id);
        }
        Some(id)
    }

    /// Marks the running task finished and removes it from scheduling.
    pub fn finish_current(&mut self) -> Option<TaskId> {
        let id = self.current.take()?;
        if let Some(t) = self.tasks.get_mut(&id) {
            t.status = TaskStatus::Finished;
            t.attrs.finished = true;
        }
        Some(id)
    }

    pub fn suspend_task(&mut self, id: TaskId) -> Result<(), SimError> {
        let t = self
            .tasks
            .get_mut(&id)
            .ok_or_else(|| SimError::Logic(format!("suspend of unknown task {id}")))?;
        if t.status == TaskStatus::Finished {
            return Err(SimError::Logic(format!("suspend of finished task {id}")));
        }
        if self.current == Some(id) {
            self.current = None;
            t.context_valid = true;
        }
        t.status = TaskStatus::Suspended;
        self.ready.retain(|x| *x != id);
        Ok(())
    }

    pub fn resume_task(&mut self, id: TaskId) -> Result<(), SimError> {
        let t = self
            .tasks
            .get_mut(&id)
            .ok_or_else(|| SimError::Logic(format!("resume of unknown task {id}")))?;
        match t.status {
            TaskStatus::Finished => Err(SimError::Logic(format!("resume of finished task {id}"))),
            TaskStatus::Ready | TaskStatus::Running => Ok(()),
            TaskStatus::Suspended | TaskStatus::Aborted => {
                t.status = TaskStatus::Ready;
                self.ready.push_back(id);
                Ok(())
            }
        }
    }

    /// Drops every task whose control block lived in VM and parks the
    /// NVM-resident ones. Returns the ids of the dropped tasks.
    pub fn on_power_failure(&mut self) -> Vec<TaskId> {
        if let Some(id) = self.current.take() {
            if let Some(t) = self.tasks.get_mut(&id) {
                t.context_valid = false;
            }
        }
        self.ready.clear();
        let lost: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| !t.lengthy)
            .map(|t| t.id)
            .collect();
        for id in &lost {
            self.tasks.remove(id);
        }
        for t in self.tasks.values_mut() {
            if t.status != TaskStatus::Finished {
                t.status = TaskStatus::Suspended;
            }
        }
        lost
    }

    /// Removes finished tasks from the table.
    pub fn reap_finished(&mut self, mem: &mut Memory) -> Vec<Task> {
        let done: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Finished)
            .map(|t| t.id)
            .collect();
        done.into_iter().filter_map(|id| self.delete_task(mem, id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;

    fn attrs(name: &str) -> TaskAttributes {
        TaskAttributes {
            code_ref: 0,
            name: name.into(),
            stack_size: 256,
            priority: 1,
            finished: false,
        }
    }

    fn setup() -> (Kernel, Memory, SimClock) {
        (Kernel::new(), Memory::new(&MemoryConfig::default()), SimClock::new(1000))
    }

    #[test]
    fn create_places_stack_by_lengthiness() {
        let (mut k, mut m, c) = setup();
        let a = k.create_task(&mut m, &c, attrs("a"), false, 1500).unwrap();
        let b = k.create_task(&mut m, &c, attrs("a"), true, 1530).unwrap();
        assert_ne!(a, b);
        assert_eq!(m.get(k.task(a).unwrap().stack).unwrap().region, RegionKind::Vm);
        assert_eq!(k.task(b).unwrap().region, RegionKind::Nvm);
        assert_eq!(k.task(a).unwrap().status, TaskStatus::Ready);
    }

    #[test]
    fn round_robin_order() {
        let (mut k, mut m, mut c) = setup();
        let ids: Vec<_> = ["A", "B", "C"]
            .iter()
            .map(|n| k.create_task(&mut m, &c, attrs(n), false, 10_000).unwrap())
            .collect();
        let picked: Vec<_> = (0..7).map(|_| k.schedule_next(&mut c).unwrap()).collect();
        assert_eq!(picked, vec![ids[0], ids[1], ids[2], ids[0], ids[1], ids[2], ids[0]]);
        assert_eq!(c.ctx_switch_count(), 7);
    }

    #[test]
    fn single_task_still_advances_timestamp() {
        let (mut k, mut m, mut c) = setup();
        let a = k.create_task(&mut m, &c, attrs("a"), false, 10_000).unwrap();
        let mut last = c.ctx_switch_count();
        for _ in 0..5 {
            assert_eq!(k.schedule_next(&mut c), Some(a));
            assert!(c.ctx_switch_count() > last);
            last = c.ctx_switch_count();
        }
        k.suspend_task(a).unwrap();
        assert_eq!(k.schedule_next(&mut c), None);
        assert_eq!(c.ctx_switch_count(), 6);
    }

    #[test]
    fn suspend_resume_keeps_progress() {
        let (mut k, mut m, mut c) = setup();
        let a = k.create_task(&mut m, &c, attrs("a"), true, 10_000).unwrap();
        k.schedule_next(&mut c);
        k.task_mut(a).unwrap().advance(4_000);
        k.suspend_task(a).unwrap();
        assert!(k.task(a).unwrap().context_valid);
        k.resume_task(a).unwrap();
        assert_eq!(k.task(a).unwrap().remaining_work_us(), 6_000);
        assert_eq!(k.ready_queue().collect::<Vec<_>>(), vec![a]);
        k.schedule_next(&mut c);
        k.finish_current();
        assert!(k.suspend_task(a).is_err());
    }

    #[test]
    fn power_failure_keeps_only_nvm_tasks() {
        let (mut k, mut m, mut c) = setup();
        let short = k.create_task(&mut m, &c, attrs("s"), false, 1_000).unwrap();
        let long = k.create_task(&mut m, &c, attrs("l"), true, 100_000).unwrap();
        k.schedule_next(&mut c);
        k.schedule_next(&mut c);
        assert_eq!(k.current(), Some(long));
        k.task_mut(long).unwrap().advance(40_000);
        m.on_power_failure();
        assert_eq!(k.on_power_failure(), vec![short]);
        let t = k.task(long).unwrap();
        assert!(!t.context_valid);
        assert_eq!(t.done_work_us, 40_000);
        assert!(m.contains(t.stack));
    }
}
