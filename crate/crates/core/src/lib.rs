//! Simulator of an intermittently powered device running a checkpoint-free,
//! failure-resilient task runtime next to two checkpointing baselines.

pub mod baselines;
pub mod config;
pub mod datamgr;
pub mod error;
pub mod experiment;
pub mod journal;
pub mod kernel;
pub mod machine;
pub mod memory;
pub mod metrics;
pub mod power;
pub mod recovery;
pub mod sim;
pub mod workload;

pub use baselines::{SnapshotStore, WriteAheadLog};
pub use config::{CheckpointConfig, DrawConfig, ExperimentConfig, KernelConfig, Scheme};
pub use datamgr::{
    CommitOutcome, CommitRecord, DataConfig, DataManager, StorageMode, ValidationCost, ValidationMode, ValidationStats,
    ValidityInterval,
};
pub use error::{ConfigError, SimError};
pub use experiment::{
    compare, comparison_csv, comparison_table, ratio_rows, run_experiment, run_to_files, standard_variants, Variant,
};
pub use journal::{AbortCause, Event, EventLog, FinishedTask, Journal};
pub use kernel::{Kernel, Task, TaskAttributes, TaskId, TaskStatus};
pub use machine::{Activity, CrashObservation, Machine, Program};
pub use memory::{AllocId, Memory, MemoryConfig, MemoryError, RegionKind};
pub use metrics::{AbortCounts, MetricsReport, WorkloadStats};
pub use power::{low_voltage_threshold, PowerConfig, PowerState, PowerTrace};
pub use recovery::{RecoveryCosts, RecoveryHandler};
pub use sim::{CrashInjector, CrashPoint, CrashSite, Micros, SimClock, Timestamp};
pub use workload::{builtin_workloads, fold_read, write_value, Action, ObjectId, Workload};
