//! Fixtures shared by the benchmarks.

use irsim_core::{
    CommitOutcome, CrashInjector, DataConfig, DataManager, ExperimentConfig, Memory, MemoryConfig, Scheme,
    SimError, StorageMode, TaskId, ValidationMode,
};

/// A data manager with `objects` objects and `finished` already committed
/// writers, so validation has history to scan.
pub struct CommitFixture {
    pub mem: Memory,
    pub dm: DataManager,
    next: u32,
    objects: u16,
}

impl CommitFixture {
    pub fn new(objects: u16, finished: u32, mode: ValidationMode) -> Result<Self, SimError> {
        let cfg = DataConfig {
            object_count: objects,
            object_size: 32,
            validation: mode,
            ..DataConfig::default()
        };
        let mut mem = Memory::new(&MemoryConfig::default());
        let dm = DataManager::new(&mut mem, &cfg, StorageMode::Shadow)?;
        let mut f = Self {
            mem,
            dm,
            next: 1,
            objects,
        };
        for i in 1..=finished {
            if !matches!(f.transaction(1, 1, i as u64)?, CommitOutcome::Committed(_)) {
                return Err(SimError::Logic(format!("fixture commit {i} aborted")));
            }
        }
        Ok(f)
    }

    /// Reads the first `reads` objects, writes the last `writes`, commits.
    pub fn transaction(&mut self, reads: u16, writes: u16, now: u64) -> Result<CommitOutcome, SimError> {
        let t = TaskId(self.next);
        self.next += 1;
        self.dm.begin(&mut self.mem, t, false);
        for o in 0..reads.min(self.objects) {
            self.dm.read(&mut self.mem, t, o)?;
        }
        for o in self.objects.saturating_sub(writes)..self.objects {
            self.dm.write(&mut self.mem, t, o, &[t.0 as u8; 32])?;
        }
        self.dm.commit(&mut self.mem, t, now, &mut CrashInjector::default())
    }
}

pub fn short_run(scheme: Scheme, trace: &str, duration_ms: u64) -> ExperimentConfig {
    ExperimentConfig {
        scheme,
        trace: trace.into(),
        duration_ms,
        ..ExperimentConfig::default()
    }
}
