//! The simulated device: harvester, scheduler, data manager and one of the
//! runtime schemes, advanced together on one timeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{SnapshotStore, WorkingCopy, WriteAheadLog};
use crate::config::{ExperimentConfig, Scheme};
use crate::datamgr::{CommitOutcome, DataManager, StorageMode};
use crate::error::SimError;
use crate::journal::{AbortCause, Event, EventLog, FinishedTask, Journal};
use crate::kernel::{Kernel, TaskAttributes, TaskId, TaskStatus};
use crate::memory::{Memory, RegionKind, VmImage};
use crate::metrics::{MetricsCollector, MetricsReport, ReportInputs};
use crate::power::{PowerEventKind, PowerState};
use crate::recovery::RecoveryHandler;
use crate::sim::{CrashInjector, CrashPoint, CrashSite, EventClass, Micros, Timeline};
use crate::workload::{fold_read, write_value, Action, ObjectId, Workload};

type Values = Vec<Vec<u8>>;

/// One instance of a workload; finished tasks are replaced by a fresh task
/// of the same program when the workload repeats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub workload: usize,
    pub task: Option<TaskId>,
    pub done: bool,
}

/// Everything a system snapshot captures.
#[derive(Debug, Clone)]
pub struct SysImage {
    pub kernel: Kernel,
    pub dm: DataManager,
    pub programs: Vec<Program>,
    pub vm: VmImage,
    pub values: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Off,
    Recovery { left: Micros, total: Micros },
    Checkpoint { left: Micros, total: Micros },
    Slice { task: TaskId, left: Micros },
    Idle { left: Micros },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Power(PowerEventKind),
}

/// Durable object values around an injected crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashObservation {
    pub point: CrashPoint,
    pub at_us: Micros,
    /// Before the interrupted atomic operation started.
    pub before: Vec<Vec<u8>>,
    /// Had the operation completed.
    pub intended: Vec<Vec<u8>>,
    /// What actually survived.
    pub observed: Vec<Vec<u8>>,
}

pub struct Machine {
    scheme: Scheme,
    cfg: ExperimentConfig,
    workloads: Vec<Workload>,
    timeline: Timeline<Ev>,
    power: PowerState,
    mem: Memory,
    kernel: Kernel,
    dm: DataManager,
    programs: Vec<Program>,
    recovery: RecoveryHandler,
    snapshots: SnapshotStore<SysImage>,
    wal: Option<WriteAheadLog>,
    crash: CrashInjector,
    journal: Journal,
    log: EventLog,
    metrics: MetricsCollector,
    activity: Activity,
    booted: bool,
    since_checkpoint_us: Micros,
    last_durable_us: Micros,
    end_us: Micros,
    initial_values: Vec<Vec<u8>>,
    atomic: Option<(Values, Values)>,
    crashes: Vec<CrashObservation>,
}

impl Machine {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        Self::with_event_lines(cfg, false)
    }

    /// Like [`Machine::new`], also keeping every event line in memory.
    pub fn with_event_lines(cfg: &ExperimentConfig, keep_lines: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let scheme = cfg.scheme;
        let workloads = cfg.workload_set()?;
        let trace = cfg.power_trace()?;
        let mut mem = Memory::new(&cfg.memory);
        let mode = if scheme.checkpoints() {
            StorageMode::Volatile
        } else {
            StorageMode::Shadow
        };
        let dm = DataManager::new(&mut mem, &cfg.data, mode)?;
        let initial_values = (0..cfg.data.object_count)
            .map(|o| cfg.data.initial_value(o))
            .collect::<Result<Vec<_>, _>>()?;
        let p = &cfg.power;
        let initial_v = cfg
            .initial_voltage
            .unwrap_or_else(|| ChaCha8Rng::seed_from_u64(cfg.seed).gen_range(p.v_off..p.v_on));
        let programs = (0..workloads.len())
            .map(|workload| Program {
                workload,
                task: None,
                done: false,
            })
            .collect();
        Ok(Self {
            scheme,
            workloads,
            timeline: Timeline::new(cfg.kernel.tick_us),
            power: PowerState::new(cfg.power.clone(), trace, initial_v),
            mem,
            kernel: Kernel::new(),
            dm,
            programs,
            recovery: RecoveryHandler::new(cfg.recovery, scheme == Scheme::Ours),
            snapshots: SnapshotStore::default(),
            wal: (scheme == Scheme::Log).then(|| WriteAheadLog::new(initial_values.clone())),
            crash: CrashInjector::new(cfg.crash_schedule_points()?),
            journal: Journal::default(),
            log: EventLog::new(keep_lines),
            metrics: MetricsCollector::default(),
            activity: Activity::Off,
            booted: false,
            since_checkpoint_us: 0,
            last_durable_us: 0,
            end_us: cfg.duration_ms * 1000,
            initial_values,
            atomic: None,
            crashes: Vec::new(),
            cfg: cfg.clone(),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn now_us(&self) -> Micros {
        self.timeline.now_us()
    }

    pub fn end_us(&self) -> Micros {
        self.end_us
    }

    pub fn activity(&self) -> Activity {
        self.activity
    }

    pub fn workloads(&self) -> &[Workload] {
        &self.workloads
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn data(&self) -> &DataManager {
        &self.dm
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    pub fn power(&self) -> &PowerState {
        &self.power
    }

    pub fn recovery(&self) -> &RecoveryHandler {
        &self.recovery
    }

    pub fn programs(&self) -> &[Program] {
        &self.programs
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn events(&self) -> &EventLog {
        &self.log
    }

    pub fn metrics(&self) -> &MetricsCollector {
        &self.metrics
    }

    pub fn crashes(&self) -> &[CrashObservation] {
        &self.crashes
    }

    pub fn initial_values(&self) -> &[Vec<u8>] {
        &self.initial_values
    }

    pub fn injector(&self) -> &CrashInjector {
        &self.crash
    }

    /// Adds crash points after construction.
    pub fn inject(&mut self, cp: CrashPoint) {
        self.crash.inject(cp);
    }

    /// Object values that would survive a power failure right now.
    pub fn durable_values(&self) -> Vec<Vec<u8>> {
        match self.scheme {
            Scheme::Ours | Scheme::NaiveRerun => (0..self.dm.object_count() as ObjectId)
                .map(|o| self.dm.persistent_value(&self.mem, o).expect("slot is live"))
                .collect(),
            Scheme::Sys => self
                .snapshots
                .latest()
                .map_or_else(|| self.initial_values.clone(), |s| s.content.values.clone()),
            Scheme::Log => self.wal.as_ref().expect("log scheme").durable_values(),
        }
    }

    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_until(self.end_us)
    }

    pub fn run_until(&mut self, t_us: Micros) -> Result<(), SimError> {
        let stop = t_us.min(self.end_us);
        while self.now_us() < stop {
            match self.step(stop) {
                Ok(()) => {}
                Err(SimError::Crash(cp)) => self.on_crash(cp),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let (harvested_j, consumed_j, _) = self.power.energy_totals();
        self.metrics.report(ReportInputs {
            scheme: self.scheme.name(),
            trace: &self.power.trace().name,
            duration_ms: self.cfg.duration_ms,
            seed: self.cfg.seed,
            lengthy_class_us: self.cfg.lengthy_class_ms * 1000,
            workloads: &self.workloads,
            finished: self.journal.durable(),
            commit_validation: self.dm.commit_stats,
            full_validation: self.dm.full_stats,
            cross_check_mismatches: self.dm.cross_check_mismatches,
            harvested_j,
            consumed_j,
            events: self.log.count(),
            event_digest: self.log.digest(),
        })
    }

    fn emit(&mut self, t_us: Micros, event: Event) {
        let ctx = self.timeline.clock().ctx_switch_count();
        self.log.push(t_us, ctx, event);
    }

    fn records_tasks(&self) -> bool {
        matches!(self.scheme, Scheme::Ours | Scheme::NaiveRerun)
    }

    fn work_us(&self, code_ref: usize, lengthy: bool) -> Micros {
        let region = if lengthy { RegionKind::Nvm } else { RegionKind::Vm };
        let r = self.mem.region(region);
        let t = self.workloads[code_ref].time_us(region) as f64 * r.time_multiplier;
        (t.round() as Micros).max(1)
    }

    fn task_draw_w(&self, id: TaskId) -> f64 {
        let Some(t) = self.kernel.task(id) else {
            return self.cfg.draw.idle_w;
        };
        let r = self.mem.region(t.region);
        self.workloads[t.attrs.code_ref].draw_w(t.region) * r.energy_multiplier / r.time_multiplier
    }

    fn step(&mut self, stop: Micros) -> Result<(), SimError> {
        let start = self.now_us();
        let limit = stop - start;
        if self.activity == Activity::Off {
            if self.power.device_on() {
                return self.power_on();
            }
            let dt = self.power.time_to_power_on(limit).map_or(limit, |t| t.clamp(1, limit));
            self.run_for(dt, 0.0);
            return Ok(());
        }

        let (natural, draw) = match self.activity {
            Activity::Recovery { left, .. } | Activity::Checkpoint { left, .. } => (left, self.cfg.draw.system_w),
            Activity::Idle { left } => (left, self.cfg.draw.idle_w),
            Activity::Slice { task, left } => {
                let t = self.kernel.task(task).expect("running task exists");
                let wl = &self.workloads[t.attrs.code_ref];
                let to_step = wl
                    .script
                    .get(t.next_step)
                    .map_or(Micros::MAX, |s| s.offset_us(t.total_work_us).saturating_sub(t.done_work_us));
                (left.min(to_step).min(t.remaining_work_us()), self.task_draw_w(task))
            }
            Activity::Off => unreachable!(),
        };
        let dt = natural.min(limit);
        let off = if dt > 0 { self.run_for(dt, draw) } else { None };
        let ran = off.unwrap_or(dt);
        self.metrics.on_time_us += ran;
        if self.scheme.checkpoints() {
            self.since_checkpoint_us += ran;
        }
        match &mut self.activity {
            Activity::Recovery { left, .. } | Activity::Checkpoint { left, .. } | Activity::Idle { left } => {
                *left -= ran
            }
            Activity::Slice { task, left } => {
                *left = left.saturating_sub(ran);
                let id = *task;
                self.kernel.task_mut(id).expect("running task exists").advance(ran);
            }
            Activity::Off => {}
        }
        if let Some(k) = off {
            self.power_failure(start + k, None);
            return Ok(());
        }
        if dt < natural {
            return Ok(());
        }
        match self.activity {
            Activity::Recovery { total, .. } => self.finish_recovery(total),
            Activity::Checkpoint { total, .. } => self.finish_checkpoint(total),
            Activity::Idle { .. } => self.dispatch(),
            Activity::Slice { task, left } => {
                if self.run_due_steps(task)? || left == 0 {
                    self.dispatch()
                } else {
                    Ok(())
                }
            }
            Activity::Off => Ok(()),
        }
    }

    /// Integrates power for `dt` and handles the interrupts it raised.
    /// Returns the offset of a power loss, if any.
    fn run_for(&mut self, dt: Micros, draw_w: f64) -> Option<Micros> {
        let start = self.now_us();
        for e in self.power.step_power(dt, draw_w) {
            let class = match e.kind {
                PowerEventKind::LowVoltage => EventClass::Interrupt,
                _ => EventClass::Power,
            };
            self.timeline.schedule_in(e.offset_us, class, Ev::Power(e.kind));
        }
        let mut off = None;
        for s in self.timeline.advance(dt) {
            let Ev::Power(kind) = s.event;
            match kind {
                PowerEventKind::LowVoltage if off.is_none() && self.activity != Activity::Off => {
                    self.emit(s.deadline_us, Event::LowVoltage);
                    if self.scheme == Scheme::Ours {
                        self.recovery.on_low_voltage();
                    }
                }
                PowerEventKind::PowerOff if off.is_none() && self.activity != Activity::Off => {
                    off = Some(s.deadline_us - start);
                }
                _ => {}
            }
        }
        off
    }

    fn spawn(&mut self, p: usize) -> Result<TaskId, SimError> {
        let code_ref = self.programs[p].workload;
        let attrs = TaskAttributes {
            code_ref,
            name: self.workloads[code_ref].name.clone(),
            stack_size: self.cfg.kernel.stack_size,
            priority: 1,
            finished: false,
        };
        let work = self.work_us(code_ref, false);
        let id = self
            .kernel
            .create_task(&mut self.mem, self.timeline.clock(), attrs.clone(), false, work)?;
        if self.records_tasks() {
            self.recovery.record_task_created(&mut self.mem, id, &attrs, false)?;
        }
        self.dm.begin(&mut self.mem, id, false);
        self.programs[p].task = Some(id);
        Ok(id)
    }

    fn power_on(&mut self) -> Result<(), SimError> {
        let now = self.now_us();
        if !self.booted {
            self.booted = true;
            self.emit(now, Event::PowerOn { cold: true });
            for p in 0..self.programs.len() {
                self.spawn(p)?;
            }
            return self.dispatch();
        }
        self.emit(now, Event::PowerOn { cold: false });
        let ck = &self.cfg.checkpoint;
        let d = match self.scheme {
            Scheme::Ours | Scheme::NaiveRerun => self.recovery.recovery_cost_us(),
            Scheme::Sys => ck.recovery_us(Scheme::Sys),
            Scheme::Log if ck.proportional_recovery => {
                let records = self.wal.as_ref().map_or(0, |w| w.records().len()) as Micros;
                ck.recovery_base_us + ck.recovery_per_record_us * records
            }
            Scheme::Log => ck.recovery_us(Scheme::Log),
        };
        self.activity = Activity::Recovery { left: d, total: d };
        Ok(())
    }

    fn power_failure(&mut self, at_us: Micros, crash: Option<CrashPoint>) {
        self.metrics.power_failures += 1;
        self.metrics.recentness.add(at_us.saturating_sub(self.last_durable_us));
        if crash.is_some() {
            self.power.force_off();
        }
        self.emit(at_us, Event::PowerOff { crash });
        self.mem.on_power_failure();
        let lost = self.kernel.on_power_failure();
        let broken = self
            .kernel
            .tasks()
            .filter(|t| t.status != TaskStatus::Finished && !t.context_valid)
            .count();
        self.metrics.aborts.add(AbortCause::Power, (lost.len() + broken) as u64);
        self.dm.on_power_failure(&lost);
        if self.records_tasks() {
            self.recovery.on_power_failure(&self.kernel);
        }
        self.journal.drop_pending();
        if let Some(w) = &mut self.wal {
            w.on_power_failure();
        }
        self.atomic = None;
        self.activity = Activity::Off;
        self.timeline.clear_pending();
    }

    fn on_crash(&mut self, cp: CrashPoint) {
        let observed = self.durable_values();
        let (before, intended) = self
            .atomic
            .take()
            .unwrap_or_else(|| (observed.clone(), observed.clone()));
        self.crashes.push(CrashObservation {
            point: cp,
            at_us: self.now_us(),
            before,
            intended,
            observed,
        });
        self.power_failure(self.now_us(), Some(cp));
    }

    /// A scheduling point: the running task leaves the CPU and the next
    /// activity is chosen.
    fn dispatch(&mut self) -> Result<(), SimError> {
        self.kernel.switch_out();
        let now = self.now_us();
        if self.scheme == Scheme::Ours {
            if self.recovery.lv_flag() && self.power.v_now() >= self.power.config().v_on {
                self.power.rearm_low_voltage();
                for id in self.recovery.clear_low_voltage(&mut self.kernel)? {
                    self.emit(now, Event::Resumed { task: id });
                }
            }
            for id in self.recovery.on_context_switch_at_low_voltage(&mut self.kernel)? {
                self.metrics.lv_suspensions += 1;
                self.emit(now, Event::Suspended { task: id });
            }
        }
        if self.scheme.checkpoints() && self.since_checkpoint_us >= self.cfg.checkpoint.period_us() {
            let d = self.cfg.checkpoint.suspension_us(self.scheme);
            self.activity = Activity::Checkpoint { left: d, total: d };
            return Ok(());
        }
        self.crash.step(CrashSite::Slice).map_err(SimError::Crash)?;
        let tick = self.cfg.kernel.tick_us;
        self.activity = match self.kernel.schedule_next(self.timeline.clock_mut()) {
            Some(task) => Activity::Slice { task, left: tick },
            None => Activity::Idle { left: tick },
        };
        Ok(())
    }

    /// Executes the script steps the task has reached. Returns true when
    /// the task left the CPU for good (finished or aborted).
    fn run_due_steps(&mut self, id: TaskId) -> Result<bool, SimError> {
        let size = self.dm.object_size();
        loop {
            let t = self.kernel.task(id).expect("running task exists");
            let Some(step) = self.workloads[t.attrs.code_ref].script.get(t.next_step).copied() else {
                return Ok(false);
            };
            if step.offset_us(t.total_work_us) > t.done_work_us {
                return Ok(false);
            }
            match step.action {
                Action::Read(o) => {
                    let r = self.dm.read(&mut self.mem, id, o)?;
                    let t = self.kernel.task_mut(id).expect("running task exists");
                    t.read_digest = fold_read(&t.read_digest, o, &r.value);
                    if r.early_abort {
                        self.abort_task(id, AbortCause::Early)?;
                        return Ok(true);
                    }
                }
                Action::Write(o) => {
                    let t = self.kernel.task_mut(id).expect("running task exists");
                    let v = write_value(id, o, t.write_count, &t.read_digest, size);
                    t.write_count += 1;
                    self.dm.write(&mut self.mem, id, o, &v)?;
                }
                Action::Commit => {
                    self.commit_task(id)?;
                    return Ok(true);
                }
            }
            self.kernel.task_mut(id).expect("running task exists").next_step += 1;
        }
    }

    fn commit_task(&mut self, id: TaskId) -> Result<(), SimError> {
        if self.dm.mode() == StorageMode::Shadow {
            let before = self.durable_values();
            let mut intended = before.clone();
            if let Some(txn) = self.dm.txn(id) {
                for (o, w) in &txn.writes {
                    intended[*o as usize] = self.mem.read(w.copy)?.to_vec();
                }
            }
            self.atomic = Some((before, intended));
        }
        let ctx = self.timeline.clock().ctx_switch_count();
        let outcome = self.dm.commit(&mut self.mem, id, ctx, &mut self.crash)?;
        self.atomic = None;
        match outcome {
            CommitOutcome::Aborted { .. } => self.abort_task(id, AbortCause::Validation),
            CommitOutcome::Committed(rec) => {
                let now = self.now_us();
                let t = self.kernel.task(id).expect("committing task exists");
                let workload = t.attrs.code_ref;
                let p = self
                    .programs
                    .iter()
                    .position(|p| p.task == Some(id))
                    .ok_or_else(|| SimError::Logic(format!("{id} belongs to no program")))?;
                self.kernel.finish_current();
                if self.records_tasks() {
                    self.recovery.mark_finished(id);
                    self.metrics.mark_finished_calls += 1;
                    self.recovery.collect_finished(&mut self.mem);
                }
                self.emit(
                    now,
                    Event::Commit {
                        task: id,
                        workload: self.workloads[workload].name.clone(),
                        begin: rec.interval.begin,
                        end: rec.interval.end,
                        seq: rec.commit_seq,
                    },
                );
                let finished = FinishedTask::new(&rec, p, workload, now);
                match self.scheme {
                    Scheme::Ours | Scheme::NaiveRerun => {
                        if !rec.writes.is_empty() {
                            self.last_durable_us = now;
                        }
                        self.journal.push_durable(finished);
                    }
                    Scheme::Sys => self.journal.push_pending(finished),
                    Scheme::Log => {
                        self.journal.push_pending(finished);
                        self.wal
                            .as_mut()
                            .expect("log scheme")
                            .append_commit(id, rec.interval, rec.writes.clone());
                    }
                }
                for other in &rec.early_aborted {
                    if self.kernel.task(*other).is_some() {
                        self.abort_task(*other, AbortCause::Early)?;
                    }
                }
                self.kernel.reap_finished(&mut self.mem);
                if self.workloads[workload].repeat {
                    self.spawn(p)?;
                } else {
                    self.programs[p].task = None;
                    self.programs[p].done = true;
                }
                Ok(())
            }
        }
    }

    /// Discards the task's progress and restarts it under the same id.
    fn abort_task(&mut self, id: TaskId, cause: AbortCause) -> Result<(), SimError> {
        self.dm.abort(&mut self.mem, id);
        self.metrics.aborts.add(cause, 1);
        self.emit(self.now_us(), Event::Abort { task: id, cause });
        let t = self.kernel.task(id).expect("aborted task exists");
        let (attrs, lengthy, suspended) = (t.attrs.clone(), t.lengthy, t.status == TaskStatus::Suspended);
        let work = self.work_us(attrs.code_ref, lengthy);
        self.kernel
            .recreate_task(&mut self.mem, self.timeline.clock(), id, attrs, lengthy, work)?;
        if suspended {
            self.kernel.suspend_task(id)?;
        }
        self.dm.begin(&mut self.mem, id, lengthy);
        Ok(())
    }

    fn finish_recovery(&mut self, total: Micros) -> Result<(), SimError> {
        let now = self.now_us();
        match self.scheme {
            Scheme::Ours | Scheme::NaiveRerun => {
                let work: Vec<[Micros; 2]> = (0..self.workloads.len())
                    .map(|c| [self.work_us(c, false), self.work_us(c, true)])
                    .collect();
                let rep = self.recovery.on_power_resume(
                    &mut self.kernel,
                    &mut self.mem,
                    &mut self.dm,
                    self.timeline.clock(),
                    &|c, lengthy| work[c][lengthy as usize],
                )?;
                self.metrics.became_lengthy += rep.became_lengthy.len() as u64;
                for id in &rep.became_lengthy {
                    self.emit(now, Event::Lengthy { task: *id });
                }
                self.emit(
                    now,
                    Event::RecoveryDone {
                        duration_us: total,
                        recreated: rep.recreated.len(),
                        resumed: rep.resumed.len(),
                    },
                );
            }
            Scheme::Sys => {
                match self.snapshots.latest().map(|s| s.content.clone()) {
                    Some(img) => {
                        let watermark = self.kernel.id_watermark();
                        self.kernel = img.kernel;
                        self.kernel.reserve_ids(watermark);
                        self.dm = img.dm;
                        self.programs = img.programs;
                        self.mem.restore_vm(&img.vm);
                    }
                    None => {
                        let values: Vec<_> = self.initial_values.iter().map(|v| (v.clone(), None)).collect();
                        self.restart_programs(&values)?;
                    }
                }
                self.emit_recovery(now, total);
            }
            Scheme::Log => {
                let wal = self.wal.as_mut().expect("log scheme");
                wal.recover(&mut self.crash)?;
                let values: Vec<_> = wal.image().iter().map(|o| (o.bytes.clone(), o.writer)).collect();
                self.restart_programs(&values)?;
                self.emit_recovery(now, total);
            }
        }
        self.metrics.recovery.add(total);
        self.dispatch()
    }

    fn emit_recovery(&mut self, now: Micros, total: Micros) {
        let n = self.kernel.tasks().count();
        self.emit(
            now,
            Event::RecoveryDone {
                duration_us: total,
                recreated: n,
                resumed: 0,
            },
        );
    }

    /// Restarts every unfinished program from scratch over `values`.
    fn restart_programs(&mut self, values: &[(Vec<u8>, Option<TaskId>)]) -> Result<(), SimError> {
        let ids: Vec<TaskId> = self.kernel.tasks().map(|t| t.id).collect();
        for id in ids {
            self.kernel.delete_task(&mut self.mem, id);
        }
        let ctx = self.timeline.clock().ctx_switch_count();
        self.dm.reset_committed(&mut self.mem, values, ctx)?;
        for p in 0..self.programs.len() {
            let repeat = self.workloads[self.programs[p].workload].repeat;
            self.programs[p].task = None;
            self.programs[p].done = !repeat && self.journal.program_finished(p);
            if !self.programs[p].done {
                self.spawn(p)?;
            }
        }
        Ok(())
    }

    fn finish_checkpoint(&mut self, total: Micros) -> Result<(), SimError> {
        let now = self.now_us();
        let durable = match self.scheme {
            Scheme::Sys => {
                let values = (0..self.dm.object_count() as ObjectId)
                    .map(|o| self.dm.consistent_value(&self.mem, o))
                    .collect::<Result<Vec<_>, _>>()?;
                self.atomic = Some((self.durable_values(), values.clone()));
                let img = SysImage {
                    kernel: self.kernel.clone(),
                    dm: self.dm.clone(),
                    programs: self.programs.clone(),
                    vm: self.mem.vm_image(),
                    values,
                };
                let chunks = self.dm.object_count() + self.kernel.tasks().count();
                self.snapshots.write(img, chunks, now, &mut self.crash)?;
                self.journal.promote_all()
            }
            Scheme::Log => {
                let mut working = Vec::new();
                for txn in self.dm.txns() {
                    for (o, w) in &txn.writes {
                        working.push(WorkingCopy {
                            task: txn.task,
                            obj: *o,
                            value: self.mem.read(w.copy)?.to_vec(),
                        });
                    }
                }
                let wal = self.wal.as_mut().expect("log scheme");
                let before = wal.durable_values();
                let mut preview = wal.clone();
                preview.checkpoint(&working, &mut CrashInjector::default())?;
                self.atomic = Some((before, preview.durable_values()));
                let res = wal.checkpoint(&working, &mut self.crash);
                let mut n = 0;
                for t in wal.take_durable() {
                    n += self.journal.promote(t) as usize;
                }
                res?;
                n
            }
            _ => 0,
        };
        self.atomic = None;
        self.since_checkpoint_us = 0;
        self.last_durable_us = now;
        self.metrics.checkpoints += 1;
        self.metrics.suspension.add(total);
        self.emit(now, Event::Checkpoint { duration_us: total, durable });
        self.dispatch()
    }
}
